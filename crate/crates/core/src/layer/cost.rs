//! Closed-form parameter, FLOP and expert-rank accounting.
//!
//! FLOPs count one fused multiply-add as one operation.

use super::{LayerConfig, LayerKind};

/// Scalars in the expert weight tensor (or its factors), excluding gating.
pub fn expert_param_count(cfg: &LayerConfig) -> u64 {
    let i = cfg.folded_input() as u64;
    let o = cfg.output_dim as u64;
    let n: Vec<u64> = cfg.experts.iter().map(|&x| x as u64).collect();
    match cfg.kind {
        LayerKind::Dense => n.iter().product::<u64>() * i * o,
        LayerKind::Cp => cfg.cp_rank as u64 * (n.iter().sum::<u64>() + i + o),
        LayerKind::Tr => {
            let dims: Vec<u64> = cfg.tensor_shape().iter().map(|&x| x as u64).collect();
            let r = ring(cfg);
            dims.iter().enumerate().map(|(k, d)| r[k] * d * r[k + 1]).sum()
        }
    }
}

/// Scalars in the gating matrices and their normalization scale/shift.
pub fn gating_param_count(cfg: &LayerConfig) -> u64 {
    let n: u64 = cfg.experts.iter().map(|&x| x as u64).sum();
    let norm = if cfg.gate_norm.has_affine() { 2 * n } else { 0 };
    cfg.input_dim as u64 * n + norm
}

/// Learnable scalars of a layer built from `cfg`.
pub fn param_count(cfg: &LayerConfig) -> u64 {
    expert_param_count(cfg) + gating_param_count(cfg)
}

/// Ranks `R_1..R_{E+2}` followed by `R_1` again, closing the ring.
fn ring(cfg: &LayerConfig) -> Vec<u64> {
    let mut r: Vec<u64> = cfg.tr_ranks.iter().map(|&x| x as u64).collect();
    r.push(r[0]);
    r
}

/// Cost of the factorized forward pass for one sample (gating excluded).
pub fn flop_estimate(cfg: &LayerConfig) -> u64 {
    let i = cfg.folded_input() as u64;
    let o = cfg.output_dim as u64;
    let n: Vec<u64> = cfg.experts.iter().map(|&x| x as u64).collect();
    match cfg.kind {
        LayerKind::Dense => n.iter().product::<u64>() * i * o,
        LayerKind::Cp => cfg.cp_rank as u64 * (n.iter().sum::<u64>() + i + o),
        LayerKind::Tr => {
            let r = ring(cfg);
            let e = n.len();
            let mode_vectors: u64 = n.iter().enumerate().map(|(k, nk)| r[k] * nk * r[k + 1]).sum::<u64>() + r[e] * i * r[e + 1];
            let chain: u64 = (1..=e).map(|k| r[0] * r[k] * r[k + 1]).sum();
            mode_vectors + chain + r[0] * o * r[e + 1]
        }
    }
}

/// Cost of first materializing the full weight tensor from its factors and
/// then contracting it with the coefficient and input vectors.
pub fn naive_flop_estimate(cfg: &LayerConfig) -> u64 {
    let dims: Vec<u64> = cfg.tensor_shape().iter().map(|&x| x as u64).collect();
    let full: u64 = dims.iter().product();
    let materialize = match cfg.kind {
        LayerKind::Dense => 0,
        LayerKind::Cp => cfg.cp_rank as u64 * full,
        LayerKind::Tr => {
            // left-to-right merge of cores into an R_1 × (d_1…d_k) × R_{k+1} tensor, then a closing trace
            let r = ring(cfg);
            let mut cost = 0;
            let mut span = dims[0];
            for k in 1..dims.len() {
                cost += r[0] * span * r[k] * dims[k] * r[k + 1];
                span *= dims[k];
            }
            cost + span * r[0]
        }
    };
    materialize + full
}

/// Upper bound on the matrix rank of any single expert matrix `W_n ∈ R^{I'×O}`.
pub fn rank_bound(cfg: &LayerConfig) -> usize {
    let cap = cfg.folded_input().min(cfg.output_dim);
    match cfg.kind {
        LayerKind::Dense => cap,
        LayerKind::Cp => cap.min(cfg.cp_rank),
        LayerKind::Tr => {
            let e = cfg.levels();
            let inner = cfg.tr_ranks[..=e].iter().copied().min().unwrap_or(1);
            cap.min(cfg.tr_ranks[e + 1].saturating_mul(inner))
        }
    }
}
