//! Self-contained oracle suites: every check builds its own random instances
//! and compares the library against an independent computation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::{entmax15, softmax, GateActivation, Pointwise};
use crate::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint};
use crate::error::Result;
use crate::gradcheck::{check, DEFAULT_STEP};
use crate::layer::{
    expert_param_count, flop_estimate, init_block, init_layer, naive_flop_estimate, param_count, rank_bound, Coefficients,
    InitConfig, LayerConfig, LayerKind, MoeLayer,
};
use crate::model::Model;
use crate::norm::{Mode, NormKind};
use crate::scalar::Scalar;
use crate::tensor::{numerical_rank, Tensor, DEFAULT_RANK_TOL};

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed error metric (suite-specific; 0 for exact checks).
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }

    fn new(name: &str, tolerance: f64) -> Self {
        SuiteResult { name: name.to_string(), cases: 0, failures: 0, worst: 0.0, tolerance, detail: String::new() }
    }

    fn record(&mut self, error: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if error.is_nan() || error > self.worst {
            self.worst = if error.is_nan() { f64::INFINITY } else { error };
        }
        if !(error <= self.tolerance) {
            self.failures += 1;
            if self.detail.is_empty() {
                self.detail = what();
            }
        }
    }

    fn flag(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.record(if ok { 0.0 } else { f64::INFINITY }, what);
    }
}

/// Tab-separated table with a header row.
pub fn report_tsv(results: &[SuiteResult]) -> String {
    let mut out = String::from("suite\tcases\tfailures\tworst\ttolerance\tstatus\n");
    for r in results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{}\t{}\t{}\t{:.3e}\t{:.1e}\t{status}", r.name, r.cases, r.failures, r.worst, r.tolerance);
    }
    out
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_coefficients(rows: usize, experts: &[usize], rng: &mut ChaCha8Rng) -> Coefficients {
    let levels = experts
        .iter()
        .map(|&n| {
            let mut t = Tensor::from_fn(&[rows, n], |_| rng.random_range(0.0..1.0));
            for b in 0..rows {
                let s: f64 = t.row(b).iter().sum();
                t.row_mut(b).iter_mut().for_each(|x| *x /= s);
            }
            t
        })
        .collect();
    Coefficients { levels }
}

fn random_config(kind: LayerKind, levels: usize, max_dim: usize, rng: &mut ChaCha8Rng) -> LayerConfig {
    let experts: Vec<usize> = (0..levels).map(|_| rng.random_range(1..=4)).collect();
    let (i, o) = (rng.random_range(1..=max_dim), rng.random_range(1..=max_dim));
    let cfg = match kind {
        LayerKind::Dense => LayerConfig::dense(i, o, &experts),
        LayerKind::Cp => LayerConfig::cp(i, o, &experts, rng.random_range(1..=5)),
        LayerKind::Tr => {
            let ranks: Vec<usize> = (0..levels + 2).map(|_| rng.random_range(1..=3)).collect();
            LayerConfig::tr(i, o, &experts, &ranks)
        }
    };
    cfg.with_bias(rng.random_bool(0.5))
}

fn random_layer(cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> Result<MoeLayer<f64>> {
    init_layer(cfg, &InitConfig::new(rng.random()).with_sigma(&vec![1.0; cfg.levels()]))
}

/// `y_o = Σ W[n_1…n_E, i, o] · ∏_e a_e[n_e] · z̃_i`, summed element by element
/// over a materialized weight tensor.
pub fn naive_forward(w: &Tensor<f64>, coeffs: &Coefficients, z: &Tensor<f64>, bias: bool) -> Tensor<f64> {
    let shape = w.shape();
    let e = shape.len() - 2;
    let (inp, o) = (shape[e], shape[e + 1]);
    let experts: usize = shape[..e].iter().product();
    let mut out = Tensor::zeros(&[z.rows(), o]);
    let data = w.data();
    for b in 0..z.rows() {
        let mut zt = z.row(b).to_vec();
        if bias {
            zt.push(1.0);
        }
        let y = out.row_mut(b);
        for flat in 0..experts {
            let mut rem = flat;
            let mut coef = 1.0;
            for l in (0..e).rev() {
                coef *= coeffs.row(l, b)[rem % shape[l]];
                rem /= shape[l];
            }
            for (i, zi) in zt.iter().enumerate().take(inp) {
                let base = (flat * inp + i) * o;
                for (k, yk) in y.iter_mut().enumerate() {
                    *yk += coef * zi * data[base + k];
                }
            }
        }
    }
    out
}

/// Factorized forward passes against the element-wise sum over the
/// materialized tensor, for levels `1..=max_levels`.
pub fn oracle_equivalence(kind: LayerKind, levels: &[usize], instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult::new(&format!("oracle_{}_E{}", kind.name(), levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("")), 1e-10);
    for k in 0..instances {
        let e = levels[k % levels.len()];
        let cfg = random_config(kind, e, 8, &mut rng);
        let layer = random_layer(&cfg, &mut rng)?;
        let rows = rng.random_range(1..=4);
        let z = random(&[rows, cfg.input_dim], &mut rng);
        let coeffs = random_coefficients(rows, &cfg.experts, &mut rng);
        let fast = layer.forward_with_coefficients(&coeffs, &z)?;
        let slow = naive_forward(&layer.weights.materialize()?.to_f64(), &coeffs, &z, cfg.bias);
        r.record(fast.rel_l2_error(&slow), || format!("{cfg:?}"));
    }
    Ok(r)
}

fn grad_configs() -> Vec<(GateActivation, NormKind)> {
    let mut out = Vec::new();
    for act in [GateActivation::Entmax15, GateActivation::Softmax] {
        for norm in [NormKind::None, NormKind::Batch, NormKind::Layer] {
            out.push((act, norm));
        }
    }
    out
}

/// Every parameter group and the input gradient against central differences.
pub fn gradient_check(instances_per_config: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult::new("gradients", 1e-5);
    for kind in LayerKind::ALL {
        for (act, norm) in grad_configs() {
            for _ in 0..instances_per_config {
                let levels = rng.random_range(1..=2);
                // layer norm over two logits is constant (±1), so its gradients vanish identically
                let experts: Vec<usize> = (0..levels).map(|_| rng.random_range(3..=4)).collect();
                let (i, o) = (rng.random_range(2..=6), rng.random_range(1..=6));
                let mut cfg = random_config(kind, levels, 6, &mut rng).with_gating(act, norm);
                cfg.experts = experts;
                cfg.input_dim = i;
                cfg.output_dim = o;
                if kind == LayerKind::Tr {
                    cfg.tr_ranks = (0..levels + 2).map(|_| rng.random_range(1..=3)).collect();
                }
                let mut layer = random_layer(&cfg, &mut rng)?;
                for g in layer.gating.weights.iter_mut() {
                    *g = g.map(|x| 3.0 * x);
                }
                for n in layer.gating.norms.iter_mut() {
                    n.gamma = Tensor::from_fn(n.gamma.shape(), |_| rng.random_range(0.5..1.5));
                    n.beta = Tensor::from_fn(n.beta.shape(), |_| rng.random_range(-0.5..0.5));
                }
                let rows = rng.random_range(3..=5);
                let z = random(&[rows, i], &mut rng);
                let u = random(&[rows, o], &mut rng);
                for c in check(&layer, &z, &u, DEFAULT_STEP)? {
                    r.record(c.rel_error, || format!("{} {} {} {}: {}", kind.name(), act.name(), norm.name(), c.name, c.rel_error));
                }
            }
        }
        for _ in 0..instances_per_config {
            let (i, h, o) = (rng.random_range(2..=5), rng.random_range(2..=5), rng.random_range(1..=5));
            let experts = [rng.random_range(2..=3)];
            let first = random_config(kind, 1, 6, &mut rng);
            let first = LayerConfig { input_dim: i, output_dim: h, experts: experts.to_vec(), ..first };
            let second = LayerConfig { input_dim: h, output_dim: o, ..first.clone() };
            let first = first.with_gating(GateActivation::Entmax15, NormKind::Batch);
            let block = init_block::<f64>(&first, &second, Pointwise::Gelu, &InitConfig::new(rng.random()).with_sigma(&[1.0]))?;
            let z = random(&[4, i], &mut rng);
            let u = random(&[4, o], &mut rng);
            for c in check(&block, &z, &u, DEFAULT_STEP)? {
                r.record(c.rel_error, || format!("{} block {}: {}", kind.name(), c.name, c.rel_error));
            }
        }
    }
    Ok(r)
}

/// Numerical rank of random expert matrices against the closed-form bound,
/// with equality required whenever the bound is below `min(I', O)`.
pub fn rank_bounds(kind: LayerKind, instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult::new(&format!("rank_bound_{}", kind.name()), 0.0);
    for _ in 0..instances {
        let cfg = random_config(kind, 1, 8, &mut rng);
        let layer = random_layer(&cfg, &mut rng)?;
        let n = [rng.random_range(0..cfg.experts[0])];
        let w = layer.materialize_expert(&n)?;
        let rank = numerical_rank(&w, DEFAULT_RANK_TOL)?;
        let bound = rank_bound(&cfg);
        let full = cfg.folded_input().min(cfg.output_dim);
        let ok = rank <= bound && (bound >= full || rank == bound);
        r.flag(ok, || format!("{cfg:?}: rank {rank}, bound {bound}"));
    }
    Ok(r)
}

/// Coefficient-masked ablation against the materialized tensor with the
/// expert's slice set to zero.
pub fn ablation_equivalence(kind: LayerKind, instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult::new(&format!("ablation_{}", kind.name()), 1e-10);
    for _ in 0..instances {
        let levels = rng.random_range(1..=2);
        let cfg = random_config(kind, levels, 6, &mut rng);
        let layer = random_layer(&cfg, &mut rng)?;
        let level = rng.random_range(0..levels);
        let expert = rng.random_range(0..cfg.experts[level]);
        let rows = rng.random_range(1..=4);
        let z = random(&[rows, cfg.input_dim], &mut rng);
        let coeffs = layer.coefficients(&z, Mode::Eval)?;
        let ablated = layer.ablate(level, expert)?.predict(&z)?;
        let mut w = layer.weights.materialize()?.to_f64();
        let shape = w.shape().to_vec();
        let inner: usize = shape[level + 1..].iter().product();
        for (k, v) in w.data_mut().iter_mut().enumerate() {
            if (k / inner) % shape[level] == expert {
                *v = 0.0;
            }
        }
        let want = naive_forward(&w, &coeffs, &z, cfg.bias);
        let err = if want.frobenius_norm() == 0.0 { ablated.frobenius_norm() } else { ablated.rel_l2_error(&want) };
        r.record(err, || format!("{cfg:?} level {level} expert {expert}"));
    }
    Ok(r)
}

/// Simplex membership, shift invariance, support shrinkage under scaling and
/// permutation equivariance of entmax and softmax.
pub fn simplex_properties(cases: usize, seed: u64) -> Result<SuiteResult> {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult::new("simplex_maps", 0.0);
    for _ in 0..cases {
        let n = rng.random_range(1..=12);
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        let x: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let shift = rng.random_range(-50.0..50.0);
        let t = rng.random_range(1.0..5.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, rng.random_range(0..=k));
        }
        for (name, f) in [("entmax15", entmax15 as fn(&[f64]) -> Result<Vec<f64>>), ("softmax", softmax)] {
            let p = f(&x)?;
            let sum: f64 = p.iter().sum();
            let simplex = (sum - 1.0).abs() <= 1e-12 && p.iter().all(|&v| v >= 0.0);
            let shifted = f(&x.iter().map(|v| v + shift).collect::<Vec<_>>())?;
            let shift_ok = p.iter().zip(&shifted).all(|(a, b)| (a - b).abs() <= 1e-9);
            let permuted = f(&perm.iter().map(|&k| x[k]).collect::<Vec<_>>())?;
            let perm_ok = perm.iter().enumerate().all(|(j, &k)| (permuted[j] - p[k]).abs() <= TOL);
            let scaled = f(&x.iter().map(|v| v * t).collect::<Vec<_>>())?;
            let shrink_ok = scaled.iter().zip(&p).all(|(s, v)| *s == 0.0 || *v > 0.0);
            for (prop, ok) in [("simplex", simplex), ("shift", shift_ok), ("permutation", perm_ok), ("support", shrink_ok)] {
                r.flag(ok, || format!("{name} {prop} on {x:?}"));
            }
        }
    }
    Ok(r)
}

fn random_model<T: Scalar>(kind: LayerKind, with_block: bool, rng: &mut ChaCha8Rng) -> Result<Model<T>> {
    let norm = [NormKind::None, NormKind::Batch, NormKind::Layer][rng.random_range(0..3)];
    let levels = rng.random_range(1..=2);
    let head = random_config(kind, levels, 6, rng).with_gating(GateActivation::Entmax15, norm);
    let head_layer = init_layer(&head, &InitConfig::new(rng.random()).with_sigma(&[1.0, 1.0]))?;
    if !with_block {
        return Ok(Model::head_only(head_layer));
    }
    let hidden = rng.random_range(1..=5);
    let first = LayerConfig { output_dim: hidden, ..head.clone() };
    let first = LayerConfig { input_dim: rng.random_range(1..=5), ..first };
    let second = LayerConfig { input_dim: hidden, output_dim: head.input_dim, ..head.clone() };
    let block = init_block(&first, &second, Pointwise::Relu, &InitConfig::new(rng.random()).with_sigma(&[1.0, 1.0]))?;
    Model::with_block(block, head_layer)
}

fn round_trip<T: Scalar>(model: &Model<T>, rng: &mut ChaCha8Rng) -> Result<bool> {
    let bytes = model_checkpoint(model, None).encode()?;
    let (back, _) = model_from_checkpoint::<T>(&Checkpoint::decode(&bytes)?)?;
    let again = model_checkpoint(&back, None).encode()?;
    let x = random(&[3, model.input_dim()], rng);
    let same_out = model.predict(&x)?.data() == back.predict(&x)?.data();
    Ok(bytes == again && same_out)
}

/// Save, load and save again: byte-identical files, equal models and
/// bit-identical forward outputs, for both storage types.
pub fn serialization_round_trip(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult::new("serialization", 0.0);
    for k in 0..instances {
        let kind = LayerKind::ALL[k % 3];
        let with_block = k % 2 == 1;
        let ok64 = round_trip(&random_model::<f64>(kind, with_block, &mut rng)?, &mut rng)?;
        r.flag(ok64, || format!("f64 {} block={with_block}", kind.name()));
        let ok32 = round_trip(&random_model::<f32>(kind, with_block, &mut rng)?, &mut rng)?;
        r.flag(ok32, || format!("f32 {} block={with_block}", kind.name()));
    }
    Ok(r)
}

/// Parameter counts of the reference configurations, exactly.
pub fn reference_param_counts() -> SuiteResult {
    let mut r = SuiteResult::new("param_counts", 0.0);
    let cp = LayerConfig::cp(768, 1000, &[128], 512);
    let tr = LayerConfig::tr(768, 1000, &[128], &[4, 4, 512]);
    let dense = LayerConfig::dense(768, 1000, &[128]);
    for (what, got, want) in [
        ("cp", param_count(&cp), 1_069_568),
        ("tr", param_count(&tr), 3_723_264),
        ("dense experts", expert_param_count(&dense), 98_432_000),
    ] {
        r.flag(got == want, || format!("{what}: {got} != {want}"));
    }
    let ratio = gpt2_param_ratio();
    r.flag((ratio / (14.5e9 / 57.0e6) - 1.0).abs() <= 0.05, || format!("gpt2 ratio {ratio}"));
    r
}

/// Dense-to-CP parameter ratio over twelve `768 → 3072 → 768` expert blocks
/// with `N = 256`. The CP rank 576 makes each CP block about as large as one
/// dense MLP block; biases are folded and the gating is counted once per block.
pub fn gpt2_param_ratio() -> f64 {
    let (n, d, h, rank) = (256, 768, 3072, 576);
    let dense = expert_param_count(&LayerConfig::dense(d, h, &[n])) + expert_param_count(&LayerConfig::dense(h, d, &[n]));
    let first = LayerConfig::cp(d, h, &[n], rank);
    let cp = param_count(&first) + expert_param_count(&LayerConfig::cp(h, d, &[n], rank));
    dense as f64 / cp as f64
}

/// Closed-form FLOP counts against an independent evaluation of the formulas.
pub fn flop_formulas(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteResult::new("flop_formulas", 0.0);
    for k in 0..instances {
        let (i, o) = (rng.random_range(1..=2048u64), rng.random_range(1..=2048u64));
        let n = rng.random_range(1..=1024u64);
        let (iu, ou, nu) = (i as usize, o as usize, n as usize);
        let (cfg, want) = match k % 3 {
            0 => (LayerConfig::dense(iu, ou, &[nu]).with_bias(false), n * i * o),
            1 => {
                let rank = rng.random_range(1..=1024u64);
                (LayerConfig::cp(iu, ou, &[nu], rank as usize).with_bias(false), rank * (n + i + o))
            }
            _ => {
                let [r1, r2, r3] = [rng.random_range(1..=16u64), rng.random_range(1..=16u64), rng.random_range(1..=512u64)];
                let cfg = LayerConfig::tr(iu, ou, &[nu], &[r1 as usize, r2 as usize, r3 as usize]).with_bias(false);
                (cfg, r2 * i * r3 + r1 * n * r2 + r1 * r2 * r3 + r1 * o * r3)
            }
        };
        let got = flop_estimate(&cfg);
        r.flag(got == want, || format!("{cfg:?}: {got} != {want}"));
    }
    for cfg in [LayerConfig::cp(768, 768, &[512], 512), LayerConfig::tr(768, 768, &[512], &[4, 4, 512])] {
        let ratio = naive_flop_estimate(&cfg) as f64 / flop_estimate(&cfg) as f64;
        r.flag(ratio > 1e4, || format!("naive/fast ratio {ratio} for {:?}", cfg.kind));
    }
    r
}

/// Every suite at the sizes used by the `verify` command.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for kind in [LayerKind::Cp, LayerKind::Tr] {
        out.push(oracle_equivalence(kind, &[1], 1000, seed)?);
        out.push(oracle_equivalence(kind, &[2, 3], 1000, seed + 1)?);
    }
    out.push(oracle_equivalence(LayerKind::Dense, &[1, 2, 3], 200, seed + 2)?);
    out.push(gradient_check(2, seed + 3)?);
    for kind in LayerKind::ALL {
        out.push(rank_bounds(kind, 100, seed + 4)?);
    }
    for kind in LayerKind::ALL {
        out.push(ablation_equivalence(kind, 200, seed + 5)?);
    }
    out.push(simplex_properties(10_000, seed + 6)?);
    out.push(serialization_round_trip(12, seed + 7)?);
    out.push(reference_param_counts());
    out.push(flop_formulas(50, seed + 8));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gpt2_ratio_is_close() {
        let r = gpt2_param_ratio();
        assert!((r - 245.9).abs() < 0.1, "{r}");
    }
}
