//! The multilinear mixture-of-experts layer family.
//!
//! A layer maps a batch `Z ∈ R^{B×I}` to `Y ∈ R^{B×O}`. Each sample's output is
//! the expert weight tensor contracted with the gating coefficients of every
//! hierarchy level and the (bias-folded) input:
//! `y = W ×_1 a_1 ×_2 … ×_E a_E ×_{E+1} z̃`.

mod block;
mod config;
pub mod cost;
mod gating;
mod init;
mod weights;

pub use block::{block_forward, BlockCache, MoeBlock};
pub use config::{LayerConfig, LayerKind};
pub use cost::{expert_param_count, flop_estimate, naive_flop_estimate, param_count, rank_bound};
pub use gating::{Coefficients, GateCache, Gating};
pub use init::{init_block, init_layer, InitConfig};
pub use weights::{SampleCache, Weights};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::norm::{Mode, RunningUpdate};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows per work unit in the batched backward pass. Fixed so the gradient
/// reduction order does not depend on the thread count.
const BACKWARD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer<T = f64> {
    pub config: LayerConfig,
    pub gating: Gating<T>,
    pub weights: Weights<T>,
    ablated: Vec<(usize, usize)>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Tensor<f64>,
    gate: GateCache,
    experts: ExpertCache,
}

impl LayerCache {
    /// Gating output before any ablation mask.
    pub fn coefficients(&self) -> &Coefficients {
        self.gate.coefficients()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ExpertCache {
    coeffs: Coefficients,
    samples: Vec<SampleCache>,
}

pub struct LayerOutput {
    pub output: Tensor<f64>,
    pub cache: LayerCache,
    pub updates: Vec<Option<RunningUpdate>>,
}

/// Gradients of every learnable tensor (in `params()` order) and of the input.
pub struct Gradients {
    pub params: Vec<Tensor<f64>>,
    pub input: Tensor<f64>,
}

pub(crate) fn check_input(z: &Tensor<f64>, dim: usize) -> Result<()> {
    if z.order() != 2 || z.cols() != dim {
        return Err(Error::shape(format!("expected a B×{dim} input, got shape {:?}", z.shape())));
    }
    Ok(())
}

fn folded_row(z: &Tensor<f64>, b: usize, bias: bool) -> Vec<f64> {
    let mut v = z.row(b).to_vec();
    if bias {
        v.push(1.0);
    }
    v
}

/// Contracts the expert tensor for every row. Rows are independent, so they
/// are processed in parallel without affecting the result.
pub(crate) fn experts_forward<T: Scalar>(
    cfg: &LayerConfig,
    weights: &Weights<T>,
    coeffs: &Coefficients,
    z: &Tensor<f64>,
    keep: bool,
) -> Result<(Tensor<f64>, Option<ExpertCache>)> {
    check_input(z, cfg.input_dim)?;
    let b = z.rows();
    if coeffs.rows() != b || coeffs.levels.len() != cfg.levels() {
        return Err(Error::shape("coefficients do not match the batch or hierarchy depth"));
    }
    let rows: Vec<(Vec<f64>, SampleCache)> = (0..b)
        .into_par_iter()
        .map(|r| {
            let zr = folded_row(z, r, cfg.bias);
            let mut modes: Vec<&[f64]> = (0..cfg.levels()).map(|e| coeffs.row(e, r)).collect();
            modes.push(&zr);
            weights.apply(&modes)
        })
        .collect();
    let o = cfg.output_dim;
    let mut data = Vec::with_capacity(b * o);
    let mut samples = Vec::with_capacity(if keep { b } else { 0 });
    for (y, c) in rows {
        data.extend(y);
        if keep {
            samples.push(c);
        }
    }
    let cache = keep.then(|| ExpertCache { coeffs: coeffs.clone(), samples });
    Ok((Tensor::matrix(b, o, data)?, cache))
}

pub(crate) struct ExpertGrads {
    pub weights: Vec<Vec<f64>>,
    pub coeffs: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

/// Per-chunk weight gradients and per-row mode gradients.
type ChunkGrads = (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>);

pub(crate) fn experts_backward<T: Scalar>(
    cfg: &LayerConfig,
    weights: &Weights<T>,
    cache: &ExpertCache,
    z: &Tensor<f64>,
    g: &Tensor<f64>,
) -> Result<ExpertGrads> {
    let b = z.rows();
    if g.order() != 2 || g.rows() != b || g.cols() != cfg.output_dim || cache.samples.len() != b {
        return Err(Error::usage("forward cache does not match the upstream gradient"));
    }
    let sizes: Vec<usize> = weights.tensors().iter().map(|t| t.len()).collect();
    let chunks: Vec<usize> = (0..b).step_by(BACKWARD_CHUNK).collect();
    let partials: Vec<Result<ChunkGrads>> = chunks
        .par_iter()
        .map(|&start| {
            let mut local: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut dmodes = Vec::new();
            for r in start..(start + BACKWARD_CHUNK).min(b) {
                let zr = folded_row(z, r, cfg.bias);
                let mut modes: Vec<&[f64]> = (0..cfg.levels()).map(|e| cache.coeffs.row(e, r)).collect();
                modes.push(&zr);
                dmodes.push(weights.backward(&modes, &cache.samples[r], g.row(r), &mut local)?);
            }
            Ok((local, dmodes))
        })
        .collect();

    let mut wgrads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut dcoeffs: Vec<Vec<f64>> = cfg.experts.iter().map(|&n| Vec::with_capacity(b * n)).collect();
    let mut dz = Vec::with_capacity(b * cfg.input_dim);
    for part in partials {
        let (local, dmodes) = part?;
        for (acc, l) in wgrads.iter_mut().zip(local) {
            acc.iter_mut().zip(l).for_each(|(a, v)| *a += v);
        }
        for mut dm in dmodes {
            let dzr = dm.pop().expect("input mode gradient");
            dz.extend_from_slice(&dzr[..cfg.input_dim]);
            for (e, d) in dm.into_iter().enumerate() {
                dcoeffs[e].extend(d);
            }
        }
    }
    Ok(ExpertGrads { weights: wgrads, coeffs: dcoeffs, input: dz })
}

/// Zeroes the coefficient gradient of ablated experts (their coefficients are masked to 0).
pub(crate) fn mask_gradients(dcoeffs: &mut [Vec<f64>], experts: &[usize], ablated: &[(usize, usize)]) {
    for &(e, n) in ablated {
        let width = experts[e];
        for v in dcoeffs[e].iter_mut().skip(n).step_by(width) {
            *v = 0.0;
        }
    }
}

pub(crate) fn check_ablation(experts: &[usize], level: usize, expert: usize) -> Result<()> {
    if level >= experts.len() || expert >= experts[level] {
        return Err(Error::Index(format!("expert ({level}, {expert}) is outside the expert grid {experts:?}")));
    }
    Ok(())
}

pub(crate) fn weight_names(kind: LayerKind, count: usize) -> Vec<String> {
    match kind {
        LayerKind::Dense => vec!["dense.weight".to_string()],
        LayerKind::Cp => (1..=count).map(|k| format!("cp.factor.{k}")).collect(),
        LayerKind::Tr => (1..=count).map(|k| format!("tr.core.{k}")).collect(),
    }
}

impl<T: Scalar> MoeLayer<T> {
    /// Assembles a layer from parts, checking every shape against `config`.
    pub fn from_parts(config: LayerConfig, gating: Gating<T>, weights: Weights<T>) -> Result<Self> {
        config.validate()?;
        validate_weights(&config, &weights)?;
        if gating.input_dim() != config.input_dim || gating.experts() != config.experts {
            return Err(Error::shape("gating shape does not match the layer configuration"));
        }
        Ok(MoeLayer { config, gating, weights, ablated: Vec::new() })
    }

    pub fn ablated(&self) -> &[(usize, usize)] {
        &self.ablated
    }

    /// Copy of the layer whose expert `expert` at hierarchy level `level`
    /// (both 0-based) is switched off by masking its coefficient to zero.
    pub fn ablate(&self, level: usize, expert: usize) -> Result<Self> {
        check_ablation(&self.config.experts, level, expert)?;
        let mut out = self.clone();
        if !out.ablated.contains(&(level, expert)) {
            out.ablated.push((level, expert));
        }
        Ok(out)
    }

    pub fn clear_ablations(&mut self) {
        self.ablated.clear();
    }

    pub fn coefficients(&self, z: &Tensor<f64>, mode: Mode) -> Result<Coefficients> {
        Ok(self.gating.forward(z, mode)?.0)
    }

    /// Pure forward pass; running-statistic updates are returned, not applied.
    pub fn forward(&self, z: &Tensor<f64>, mode: Mode) -> Result<LayerOutput> {
        check_input(z, self.config.input_dim)?;
        let (coeffs, gate, updates) = self.gating.forward(z, mode)?;
        let masked = coeffs.masked(&self.ablated);
        let (output, experts) = experts_forward(&self.config, &self.weights, &masked, z, true)?;
        let cache = LayerCache { input: z.clone(), gate, experts: experts.expect("cache requested") };
        Ok(LayerOutput { output, cache, updates })
    }

    /// Training-mode forward pass that applies the running-statistic updates.
    pub fn forward_train(&mut self, z: &Tensor<f64>) -> Result<(Tensor<f64>, LayerCache)> {
        let out = self.forward(z, Mode::Training)?;
        self.gating.apply_updates(&out.updates);
        Ok((out.output, out.cache))
    }

    /// Eval-mode output without keeping a cache.
    pub fn predict(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let coeffs = self.coefficients(z, Mode::Eval)?;
        self.forward_with_coefficients(&coeffs, z)
    }

    /// Output for externally supplied coefficients (ablation mask still applies).
    pub fn forward_with_coefficients(&self, coeffs: &Coefficients, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let masked = coeffs.masked(&self.ablated);
        Ok(experts_forward(&self.config, &self.weights, &masked, z, false)?.0)
    }

    pub fn backward(&self, cache: &LayerCache, upstream: &Tensor<f64>) -> Result<Gradients> {
        let z = &cache.input;
        let mut eg = experts_backward(&self.config, &self.weights, &cache.experts, z, upstream)?;
        mask_gradients(&mut eg.coeffs, &self.config.experts, &self.ablated);
        let (mut grads, dz_gate) = self.gating.backward(z, &cache.gate, &eg.coeffs)?;
        grads.extend(eg.weights);
        let shapes: Vec<Vec<usize>> = self.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let params = grads
            .into_iter()
            .zip(&shapes)
            .map(|(g, s)| Tensor::from_vec(s, g))
            .collect::<Result<Vec<_>>>()?;
        let dz: Vec<f64> = eg.input.iter().zip(&dz_gate).map(|(a, b)| a + b).collect();
        Ok(Gradients { params, input: Tensor::matrix(z.rows(), z.cols(), dz)? })
    }

    /// Learnable tensors, gating first, with names relative to the layer.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.gating.params();
        let w = self.weights.tensors();
        out.extend(weight_names(self.config.kind, w.len()).into_iter().zip(w));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.gating.params_mut();
        out.extend(self.weights.tensors_mut());
        out
    }

    /// Total learnable scalars actually stored.
    pub fn stored_param_count(&self) -> u64 {
        self.params().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Expert matrix `W_n ∈ R^{I'×O}` for the 0-based multi-index `n`,
    /// computed from the factors without building the full tensor.
    pub fn materialize_expert(&self, n: &[usize]) -> Result<Tensor<f64>> {
        materialize_expert(&self.config, &self.weights, n)
    }

    /// Copy of the layer with every expert matrix replaced by `f(W_n)`,
    /// stored densely.
    pub fn map_experts(&self, f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>) -> Result<MoeLayer<T>> {
        let weights = map_experts(&self.config, &self.weights, f)?;
        let mut config = self.config.clone();
        config.kind = LayerKind::Dense;
        Ok(MoeLayer { config, gating: self.gating.clone(), weights, ablated: self.ablated.clone() })
    }
}

pub(crate) fn validate_weights<T: Scalar>(cfg: &LayerConfig, weights: &Weights<T>) -> Result<()> {
    let want = cfg.tensor_shape();
    match (cfg.kind, weights) {
        (LayerKind::Dense, Weights::Dense(w)) => {
            if w.shape() != want.as_slice() {
                return Err(Error::shape(format!("dense weight has shape {:?}, expected {want:?}", w.shape())));
            }
        }
        (LayerKind::Cp, Weights::Cp(f)) => {
            if f.len() != want.len() {
                return Err(Error::shape(format!("expected {} CP factors, got {}", want.len(), f.len())));
            }
            for (k, (m, &d)) in f.iter().zip(&want).enumerate() {
                if m.rank() != cfg.cp_rank {
                    return Err(Error::Rank(format!("factor {} has rank {}, expected {}", k + 1, m.rank(), cfg.cp_rank)));
                }
                if m.dim() != d {
                    return Err(Error::shape(format!("factor {} has mode extent {}, expected {d}", k + 1, m.dim())));
                }
            }
        }
        (LayerKind::Tr, Weights::Tr(c)) => {
            if c.len() != want.len() {
                return Err(Error::shape(format!("expected {} ring cores, got {}", want.len(), c.len())));
            }
            crate::tensor::check_ring(c)?;
            for (k, (core, &d)) in c.iter().zip(&want).enumerate() {
                if core.dim() != d || core.rank_in() != cfg.tr_ranks[k] {
                    return Err(Error::shape(format!(
                        "core {} has shape {:?}, expected ({}, {d}, {})",
                        k + 1,
                        core.tensor().shape(),
                        cfg.tr_ranks[k],
                        cfg.tr_ranks[(k + 1) % want.len()]
                    )));
                }
            }
        }
        _ => return Err(Error::config("weight storage does not match the layer kind")),
    }
    Ok(())
}

fn check_expert_index(experts: &[usize], n: &[usize]) -> Result<()> {
    if n.len() != experts.len() || n.iter().zip(experts).any(|(i, e)| i >= e) {
        return Err(Error::Index(format!("expert index {n:?} is outside the grid {experts:?}")));
    }
    Ok(())
}

pub(crate) fn materialize_expert<T: Scalar>(cfg: &LayerConfig, weights: &Weights<T>, n: &[usize]) -> Result<Tensor<f64>> {
    check_expert_index(&cfg.experts, n)?;
    let (i, o) = (cfg.folded_input(), cfg.output_dim);
    let e = cfg.levels();
    match weights {
        Weights::Dense(w) => {
            let base: usize = n.iter().zip(w.strides()).map(|(a, s)| a * s).sum();
            Ok(Tensor::from_fn(&[i, o], |ix| w.data()[base + ix[0] * o + ix[1]].to_f64()))
        }
        Weights::Cp(f) => {
            // W_n = Σ_r (∏_e U_e[r, n_e]) · U_in[r, :]ᵀ U_out[r, :]
            let rank = f[0].rank();
            let mut out = vec![0.0; i * o];
            for r in 0..rank {
                let scale: f64 = (0..e).map(|k| f[k].at(r, n[k]).to_f64()).product();
                for a in 0..i {
                    let left = scale * f[e].at(r, a).to_f64();
                    for b in 0..o {
                        out[a * o + b] += left * f[e + 1].at(r, b).to_f64();
                    }
                }
            }
            Tensor::matrix(i, o, out)
        }
        Weights::Tr(c) => {
            // W_n[i, o] = tr(S · C_in[:, i, :] · C_out[:, o, :]) with S the product of the expert slices
            let r1 = c[0].rank_in();
            let mut s: Vec<f64> = (0..r1 * r1).map(|x| if x / r1 == x % r1 { 1.0 } else { 0.0 }).collect();
            for k in 0..e {
                s = crate::tensor::small_matmul(&s, &c[k].lateral_slice(n[k]), r1, c[k].rank_in(), c[k].rank_out());
            }
            let (ra, rb) = (c[e].rank_in(), c[e].rank_out());
            let mut out = vec![0.0; i * o];
            for a in 0..i {
                let left = crate::tensor::small_matmul(&s, &c[e].lateral_slice(a), r1, ra, rb);
                for b in 0..o {
                    let mut acc = 0.0;
                    for x in 0..r1 {
                        for y in 0..rb {
                            acc += left[x * rb + y] * c[e + 1].at(y, b, x).to_f64();
                        }
                    }
                    out[a * o + b] = acc;
                }
            }
            Tensor::matrix(i, o, out)
        }
    }
}

pub(crate) fn map_experts<T: Scalar>(
    cfg: &LayerConfig,
    weights: &Weights<T>,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<Weights<T>> {
    let shape = cfg.tensor_shape();
    let mut dense = Tensor::<T>::zeros(&shape);
    let slice = cfg.folded_input() * cfg.output_dim;
    let mut n = vec![0usize; cfg.levels()];
    for k in 0..cfg.expert_count() {
        let w = f(&materialize_expert(cfg, weights, &n)?)?;
        if w.shape() != [cfg.folded_input(), cfg.output_dim] {
            return Err(Error::shape("expert map changed the matrix shape"));
        }
        for (dst, v) in dense.data_mut()[k * slice..(k + 1) * slice].iter_mut().zip(w.data()) {
            *dst = T::from_f64(*v);
        }
        crate::tensor::increment(&mut n, &cfg.experts);
    }
    Ok(Weights::Dense(dense))
}
