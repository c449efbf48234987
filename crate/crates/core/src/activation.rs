//! Gating activations and pointwise nonlinearities with their backward maps.

use crate::error::{Error, Result};

/// Activation mapping gating logits onto the probability simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateActivation {
    /// Exact α = 1.5 entmax (sparse).
    #[default]
    Entmax15,
    Softmax,
}

impl GateActivation {
    pub fn forward(self, logits: &[f64]) -> Result<Vec<f64>> {
        match self {
            GateActivation::Entmax15 => entmax15(logits),
            GateActivation::Softmax => softmax(logits),
        }
    }

    /// Vector-Jacobian product given the forward output `probs`.
    pub fn vjp(self, probs: &[f64], upstream: &[f64]) -> Vec<f64> {
        match self {
            GateActivation::Entmax15 => entmax15_vjp(probs, upstream),
            GateActivation::Softmax => softmax_vjp(probs, upstream),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateActivation::Entmax15 => "entmax15",
            GateActivation::Softmax => "softmax",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            GateActivation::Entmax15 => 0,
            GateActivation::Softmax => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(GateActivation::Entmax15),
            1 => Some(GateActivation::Softmax),
            _ => None,
        }
    }
}

impl std::str::FromStr for GateActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entmax15" | "entmax" => Ok(GateActivation::Entmax15),
            "softmax" => Ok(GateActivation::Softmax),
            other => Err(Error::config(format!("unknown gate activation {other:?}"))),
        }
    }
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Domain("activation input is empty".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("activation input has non-finite entries".into()));
    }
    Ok(())
}

/// Exact 1.5-entmax: `p_i = [(z_i/2 − τ)₊]²` with `τ` chosen so that `Σ p = 1`.
///
/// Logits are sorted descending (stable, so ties keep ascending index order)
/// and for every candidate support size `k` the threshold solving
/// `Σ_{top k} (z_i/2 − τ)² = 1` is computed in closed form. The support is the
/// largest `k` whose threshold stays below the `k`-th sorted value.
pub fn entmax15(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x: Vec<f64> = logits.iter().map(|z| (z - max) / 2.0).collect();
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]));

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut tau_star = f64::NAN;
    for (k, &i) in order.iter().enumerate() {
        let v = x[i];
        sum += v;
        sum_sq += v * v;
        let n = (k + 1) as f64;
        let mean = sum / n;
        let ss = sum_sq - n * mean * mean;
        let delta = ((1.0 - ss) / n).max(0.0);
        let tau = mean - delta.sqrt();
        if tau <= v {
            tau_star = tau;
        } else {
            break;
        }
    }
    Ok(x.iter().map(|&v| (v - tau_star).max(0.0).powi(2)).collect())
}

/// Backward of [`entmax15`]: with `s_i = √p_i` on the support,
/// `g_i = s_i u_i − (Σ s_j u_j / Σ s_j) s_i`.
pub fn entmax15_vjp(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    assert_eq!(probs.len(), upstream.len(), "entmax15_vjp length mismatch");
    let s: Vec<f64> = probs.iter().map(|&p| if p > 0.0 { p.sqrt() } else { 0.0 }).collect();
    let s_sum: f64 = s.iter().sum();
    let su: f64 = s.iter().zip(upstream).map(|(a, b)| a * b).sum();
    let ratio = if s_sum > 0.0 { su / s_sum } else { 0.0 };
    s.iter().zip(upstream).map(|(&si, &ui)| si * ui - ratio * si).collect()
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / total).collect())
}

pub fn softmax_vjp(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    assert_eq!(probs.len(), upstream.len(), "softmax_vjp length mismatch");
    let dot: f64 = probs.iter().zip(upstream).map(|(p, u)| p * u).sum();
    probs.iter().zip(upstream).map(|(p, u)| p * (u - dot)).collect()
}

/// Elementwise nonlinearity between the two layers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pointwise {
    /// Exact `x·Φ(x)` (erf form).
    #[default]
    Gelu,
    Relu,
    Identity,
}

impl Pointwise {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Gelu => x * normal_cdf(x),
            Pointwise::Relu => x.max(0.0),
            Pointwise::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Pointwise::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Identity => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Pointwise::Gelu => 0,
            Pointwise::Relu => 1,
            Pointwise::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Pointwise::Gelu),
            1 => Some(Pointwise::Relu),
            2 => Some(Pointwise::Identity),
            _ => None,
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    Pointwise::Gelu.apply(x)
}

pub fn relu(x: f64) -> f64 {
    Pointwise::Relu.apply(x)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
