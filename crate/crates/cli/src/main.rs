use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Train, inspect and verify multilinear mixture-of-experts models.
#[derive(Debug, Parser)]
#[command(name = "mumoe", version)]
struct Cli {
    /// Suppress human-readable summaries on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the built-in oracle suites and print a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// IDX directory or synthetic dataset description.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configuration seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print per-class test accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Configuration the checkpoint must agree with.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Ablate each expert and report polysemanticity and expert load.
    Intervene {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Add λ·(ā·a) to one output logit and compare subpopulation accuracies.
    Rewrite {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Subpopulation tag whose mean coefficients define ā.
        #[arg(long)]
        subpop: usize,
        /// Output head to correct.
        #[arg(long)]
        head: usize,
        /// Signed scale; defaults to the expert count.
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
    },
    /// Truncate every expert weight matrix by SVD and report accuracy.
    SvdAblate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Keep fractions, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        fraction: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print cost-model figures and forward timings for each layer kind.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("MUMOE_THREADS") else { return Ok(()) };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("MUMOE_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let ctx = commands::Context { quiet: cli.quiet };
    let result = match cli.command {
        Command::Verify { seed } => commands::verify(&ctx, seed),
        Command::Train { config, data, out, seed } => commands::train(&ctx, &config, &data, &out, seed),
        Command::Eval { ckpt, data, config } => commands::eval(&ctx, &ckpt, &data, config.as_deref()),
        Command::Intervene { ckpt, data, threshold } => commands::intervene(&ctx, &ckpt, &data, threshold),
        Command::Rewrite { ckpt, data, subpop, head, lambda } => commands::rewrite(&ctx, &ckpt, &data, subpop, head, lambda),
        Command::SvdAblate { ckpt, fraction, data } => commands::svd_ablate(&ctx, &ckpt, &fraction, &data),
        Command::Bench { config } => commands::bench(&ctx, &config),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
