use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use mumoe::analysis::{self, RewriteTerm};
use mumoe::checkpoint::{load_checkpoint, save_checkpoint};
use mumoe::config::{parse_config, parse_synthetic, ExperimentConfig};
use mumoe::data::{gen_synthetic, load_idx, Dataset};
use mumoe::layer::{flop_estimate, init_layer, param_count, rank_bound, InitConfig, LayerConfig, LayerKind, MoeLayer};
use mumoe::train::{self, metrics_tsv};
use mumoe::verify;
use mumoe::{Dtype, Error, Model, Result, Scalar, Tensor};

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Layers whose expert tensor holds more entries than this are not timed.
const MAX_TIMED_PARAMS: u64 = 20_000_000;

pub struct Context {
    pub quiet: bool,
}

impl Context {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Numerical failures map to 1, everything the caller got wrong to 2.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Domain(_) => 1,
        _ => 2,
    }
}

/// An IDX directory keeps its train/t10k split; a synthetic description is
/// generated and split with its own seed.
fn load_data(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        let train = load_idx(&path.join(TRAIN_IMAGES), &path.join(TRAIN_LABELS))?;
        let test_images = path.join(TEST_IMAGES);
        if !test_images.exists() {
            return Ok(train);
        }
        let test = load_idx(&test_images, &path.join(TEST_LABELS))?;
        if test.input_dim() != train.input_dim() {
            return Err(Error::Shape(format!(
                "train images have {} pixels, test images {}",
                train.input_dim(),
                test.input_dim()
            )));
        }
        let cols = train.input_dim();
        let mut data = train.inputs.into_data();
        data.extend_from_slice(test.inputs.data());
        let rows = train.labels.len() + test.labels.len();
        let mut labels = train.labels;
        labels.extend_from_slice(&test.labels);
        let mut is_test = vec![false; labels.len()];
        is_test[rows - test.labels.len()..].iter_mut().for_each(|t| *t = true);
        let classes = train.classes.max(test.classes);
        let mut ds = Dataset::new(Tensor::matrix(rows, cols, data)?, labels, None, classes)?;
        ds.is_test = is_test;
        Ok(ds)
    } else if path.is_file() {
        gen_synthetic(&parse_synthetic(path)?)
    } else {
        Err(Error::Usage(format!("data path {} does not exist", path.display())))
    }
}

fn check_dims(model: &Model<f64>, data: &Dataset) -> Result<()> {
    if data.input_dim() != model.input_dim() || data.classes > model.classes() {
        return Err(Error::Usage(format!(
            "data has {} features and {} classes, checkpoint expects {} and {}",
            data.input_dim(),
            data.classes,
            model.input_dim(),
            model.classes()
        )));
    }
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<Model<f64>> {
    if !ckpt.is_file() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", ckpt.display())));
    }
    Ok(load_checkpoint::<f64>(ckpt)?.0)
}

/// Evaluation rows: the test split when there is one, else every row.
fn eval_rows(data: &Dataset) -> Dataset {
    let test = data.test_indices();
    if test.is_empty() {
        data.clone()
    } else {
        data.subset(&test)
    }
}

pub fn verify(ctx: &Context, seed: u64) -> Result<ExitCode> {
    let start = Instant::now();
    let results = verify::run_all(seed)?;
    print!("{}", verify::report_tsv(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    ctx.note(format!(
        "{} of {} suites passed in {:.2} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    ));
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run_training<T: Scalar>(ctx: &Context, cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<()> {
    let mut model = cfg.build::<T>()?;
    let mut optimizer = cfg.optimizer.clone();
    let train_ds = data.train();
    let test_ds = data.test();
    ctx.note(format!(
        "training {} parameters on {} rows ({} held out)",
        model.param_count(),
        train_ds.len(),
        test_ds.len()
    ));
    let history = train::train(&mut model, &mut optimizer, &train_ds, Some(&test_ds), &cfg.train)?;
    fs::create_dir_all(out)?;
    save_checkpoint(&model, Some(&optimizer), &out.join("model.ckpt"))?;
    let tsv = metrics_tsv(&history);
    fs::write(out.join("metrics.tsv"), &tsv)?;
    print!("{tsv}");
    if let Some(last) = history.last() {
        let test = last.test_accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        ctx.note(format!("final loss {:.4}, train accuracy {:.4}, test accuracy {test}", last.loss, last.train_accuracy));
    }
    Ok(())
}

pub fn train(ctx: &Context, config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = parse_config(config)?;
    if let Some(seed) = seed {
        cfg.init.seed = seed;
        cfg.train.seed = seed;
    }
    let data = load_data(data)?;
    if data.input_dim() != model_input_dim(&cfg) {
        return Err(Error::Usage(format!(
            "data has {} features but the configuration expects {}",
            data.input_dim(),
            model_input_dim(&cfg)
        )));
    }
    match cfg.dtype {
        Dtype::F32 => run_training::<f32>(ctx, &cfg, &data, out)?,
        Dtype::F64 => run_training::<f64>(ctx, &cfg, &data, out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn model_input_dim(cfg: &ExperimentConfig) -> usize {
    cfg.block.as_ref().map_or(cfg.layer.input_dim, |b| b.first.input_dim)
}

fn same_shape(a: &LayerConfig, b: &LayerConfig) -> bool {
    a.kind == b.kind && a.input_dim == b.input_dim && a.output_dim == b.output_dim && a.experts == b.experts
}

pub fn eval(ctx: &Context, ckpt: &Path, data: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let model = load_model(ckpt)?;
    if let Some(path) = config {
        let cfg = parse_config(path)?;
        let block_matches = match (&cfg.block, &model.block) {
            (None, None) => true,
            (Some(spec), Some(block)) => same_shape(&spec.first, &block.first_config) && same_shape(&spec.second, &block.second_config),
            _ => false,
        };
        if !same_shape(&cfg.layer, &model.head.config) || !block_matches {
            return Err(Error::Usage(format!("checkpoint {} does not match configuration {}", ckpt.display(), path.display())));
        }
    }
    let data = load_data(data)?;
    check_dims(&model, &data)?;
    let rows = eval_rows(&data);
    let acc = train::evaluate_per_class(&model, &rows)?;
    let mut out = String::from("class\tsupport\taccuracy\n");
    for (c, (a, s)) in acc.accuracy.iter().zip(&acc.support).enumerate() {
        let _ = writeln!(out, "{c}\t{s}\t{a:.6}");
    }
    print!("{out}");
    ctx.note(format!("overall accuracy {:.4} on {} rows", acc.overall(), rows.len()));
    Ok(ExitCode::SUCCESS)
}

fn histogram(loads: &[usize]) -> String {
    const WIDTH: usize = 40;
    let max = loads.iter().copied().max().unwrap_or(0).max(1);
    let mut out = String::from("expert load histogram\n");
    for (e, &l) in loads.iter().enumerate() {
        let bar = "#".repeat((l * WIDTH).div_ceil(max));
        let _ = writeln!(out, "{e:>5} {bar:<WIDTH$} {l}");
    }
    out
}

pub fn intervene(ctx: &Context, ckpt: &Path, data: &Path, threshold: f64) -> Result<ExitCode> {
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::Usage(format!("threshold must be a non-negative number, got {threshold}")));
    }
    let model = load_model(ckpt)?;
    let data = load_data(data)?;
    check_dims(&model, &data)?;
    let rows = eval_rows(&data);
    let report = analysis::intervene(&model, &rows.inputs, &rows.labels, threshold)?;
    print!("{}", report.to_tsv());
    if !ctx.quiet {
        let loads: Vec<usize> = report.experts.iter().map(|e| e.load).collect();
        eprint!("{}", histogram(&loads));
        let mean = report.mean_score().map_or_else(|| "-".to_string(), |s| format!("{s:.4}"));
        eprintln!(
            "baseline accuracy {:.4}; {} experts alter accuracy, mean polysemanticity {mean}; {} dead",
            report.baseline.overall(),
            report.active().count(),
            report.dead().len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn group_accuracy(logits: &Tensor<f64>, labels: &[usize], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let pred = analysis::argmax_rows(logits);
    let hits = idx.iter().filter(|&&i| pred[i] == labels[i]).count();
    hits as f64 / idx.len() as f64
}

pub fn rewrite(ctx: &Context, ckpt: &Path, data: &Path, subpop: usize, head: usize, lambda: Option<f64>) -> Result<ExitCode> {
    let model = load_model(ckpt)?;
    let data = load_data(data)?;
    check_dims(&model, &data)?;
    if data.tags.is_none() {
        return Err(Error::Usage("dataset carries no subpopulation tags".into()));
    }
    if head >= model.classes() {
        return Err(Error::Usage(format!("head {head} out of range for {} outputs", model.classes())));
    }
    let train_ds = data.train();
    let members = train_ds.indices_with_tag(subpop);
    if members.is_empty() {
        return Err(Error::Usage(format!("no training rows carry tag {subpop}")));
    }
    let mean = analysis::mean_subpop_coefficients(&analysis::head_coefficients(&model, &train_ds.inputs)?, &members)?;
    let term = match lambda {
        Some(l) if l.is_finite() => RewriteTerm { head, mean, lambda: l },
        Some(l) => return Err(Error::Usage(format!("lambda must be finite, got {l}"))),
        None => RewriteTerm::with_default_scale(head, mean, 1.0),
    };

    let rows = eval_rows(&data);
    let coeffs = analysis::head_coefficients(&model, &rows.inputs)?;
    let before = model.predict(&rows.inputs)?;
    let mut after = before.clone();
    analysis::rewrite_logits(&mut after, &coeffs, &term)?;

    let all: Vec<usize> = (0..rows.len()).collect();
    let target = rows.indices_with_tag(subpop);
    let unrelated: Vec<usize> = all.iter().copied().filter(|&i| term.mean.iter().zip(coeffs.row(i)).map(|(m, a)| m * a).sum::<f64>() < 0.1).collect();
    let mut out = String::from("group\tsamples\tbefore\tafter\n");
    for (name, idx) in [("subpop", &target), ("overall", &all), ("low_affinity", &unrelated)] {
        let b = group_accuracy(&before, &rows.labels, idx);
        let a = group_accuracy(&after, &rows.labels, idx);
        let _ = writeln!(out, "{name}\t{}\t{b:.6}\t{a:.6}", idx.len());
    }
    print!("{out}");
    ctx.note(format!("rewrote head {head} with lambda {} using {} rows of tag {subpop}", term.lambda, members.len()));
    Ok(ExitCode::SUCCESS)
}

pub fn svd_ablate(ctx: &Context, ckpt: &Path, fractions: &[f64], data: &Path) -> Result<ExitCode> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Usage(format!("keep fraction {f} outside [0, 1]")));
    }
    let model = load_model(ckpt)?;
    let data = load_data(data)?;
    check_dims(&model, &data)?;
    let rows = eval_rows(&data);
    let baseline = analysis::accuracy(&model, &rows.inputs, &rows.labels)?.overall();
    let mut out = String::from("fraction\taccuracy\n");
    for &f in fractions {
        let ablated = analysis::svd_ablate_model(&model, f)?;
        let acc = analysis::accuracy(&ablated, &rows.inputs, &rows.labels)?.overall();
        let _ = writeln!(out, "{f}\t{acc:.6}");
    }
    print!("{out}");
    ctx.note(format!("unablated accuracy {baseline:.4} on {} rows", rows.len()));
    Ok(ExitCode::SUCCESS)
}

fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Median wall time of one eval-mode forward in milliseconds.
fn time_forward<T: Scalar>(layer: &MoeLayer<T>, batch: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[batch, layer.config.input_dim], |_| rng.random_range(-1.0..1.0));
    layer.predict(&x)?;
    let mut times = Vec::new();
    let start = Instant::now();
    while times.len() < 3 || (times.len() < 50 && start.elapsed().as_secs_f64() < 0.5) {
        let t = Instant::now();
        layer.predict(&x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

fn timings<T: Scalar>(cfg: &LayerConfig, init: &InitConfig) -> Result<(f64, f64)> {
    let layer = init_layer::<T>(cfg, init)?;
    Ok((time_forward(&layer, 1, init.seed)?, time_forward(&layer, 256, init.seed)?))
}

pub fn bench(ctx: &Context, config: &Path) -> Result<ExitCode> {
    let cfg = parse_config(config)?;
    let mut out = String::from("kind\tparams\tflops\trank_bound\tms_batch1\tms_batch256\n");
    for kind in [LayerKind::Dense, LayerKind::Cp, LayerKind::Tr] {
        let Some(layer) = cfg.layer_as(kind) else {
            ctx.note(format!("{}: skipped, the configuration gives no valid ranks for it", kind.name()));
            continue;
        };
        let params = param_count(&layer);
        let flops = flop_estimate(&layer);
        let bound = rank_bound(&layer);
        let (b1, b256) = if mumoe::layer::expert_param_count(&layer) > MAX_TIMED_PARAMS {
            ("-".to_string(), "-".to_string())
        } else {
            let (a, b) = match cfg.dtype {
                Dtype::F32 => timings::<f32>(&layer, &cfg.init)?,
                Dtype::F64 => timings::<f64>(&layer, &cfg.init)?,
            };
            (format!("{a:.4}"), format!("{b:.4}"))
        };
        let _ = writeln!(out, "{}\t{params}\t{flops}\t{bound}\t{b1}\t{b256}", kind.name());
        ctx.note(format!("{}: params = {}, flops = {}, rank bound = {bound}", kind.name(), grouped(params), grouped(flops)));
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_separators() {
        assert_eq!(grouped(0), "0");
        assert_eq!(grouped(999), "999");
        assert_eq!(grouped(1000), "1,000");
        assert_eq!(grouped(1069568), "1,069,568");
    }

    #[test]
    fn histogram_scales_to_largest_load() {
        let h = histogram(&[0, 5, 10]);
        assert!(h.lines().nth(3).unwrap().contains(&"#".repeat(40)));
        assert!(!h.lines().nth(1).unwrap().contains('#'));
    }
}
