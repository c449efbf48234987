//! Batch and layer normalization applied to gating logits.
//!
//! The forward pass is a pure function of the state; in training mode it also
//! returns the running-statistics update, which the owner applies explicitly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormKind {
    Batch,
    Layer,
    #[default]
    None,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
            NormKind::None => "none",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            NormKind::Batch => 0,
            NormKind::Layer => 1,
            NormKind::None => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NormKind::Batch),
            1 => Some(NormKind::Layer),
            2 => Some(NormKind::None),
            _ => None,
        }
    }

    /// Whether the kind carries learnable scale and shift.
    pub fn has_affine(self) -> bool {
        self != NormKind::None
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            "none" => Ok(NormKind::None),
            other => Err(Error::config(format!("unknown norm kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T = f64> {
    pub kind: NormKind,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

/// Values saved by [`NormState::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    rows: usize,
    features: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// True when the statistics depend on the input (batch training or layer).
    input_stats: bool,
}

/// New running statistics produced by a batch-norm training step.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct NormGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl<T: Scalar> NormState<T> {
    pub fn new(kind: NormKind, features: usize) -> Self {
        Self::with_hyper(kind, features, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_hyper(kind: NormKind, features: usize, eps: f64, momentum: f64) -> Self {
        NormState {
            kind,
            gamma: Tensor::filled(&[features], T::from_f64(1.0)),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], T::from_f64(1.0)),
            momentum: T::from_f64(momentum),
            eps: T::from_f64(eps),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        if self.kind.has_affine() {
            2 * self.features()
        } else {
            0
        }
    }

    /// Normalizes a row-major `rows × features` batch.
    pub fn forward(&self, x: &[f64], rows: usize, mode: Mode) -> Result<(Vec<f64>, NormCache, Option<RunningUpdate>)> {
        let n = self.features();
        if x.len() != rows * n {
            return Err(Error::shape(format!("norm expects {rows}×{n} values, got {}", x.len())));
        }
        let eps = self.eps.to_f64();
        let mut update = None;
        let (xhat, inv_std, input_stats) = match (self.kind, mode) {
            (NormKind::None, _) => (x.to_vec(), Vec::new(), false),
            (NormKind::Batch, Mode::Training) => {
                if rows < 2 {
                    return Err(Error::usage(format!("batch norm in training mode needs at least 2 rows, got {rows}")));
                }
                let mut mean = vec![0.0; n];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(&x[r * n..(r + 1) * n]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        let d = x[r * n + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let xhat = (0..rows * n).map(|k| (x[k] - mean[k % n]) * inv[k % n]).collect();
                let mom = self.momentum.to_f64();
                let unbiased = rows as f64 / (rows as f64 - 1.0);
                update = Some(RunningUpdate {
                    mean: (0..n).map(|j| (1.0 - mom) * self.running_mean.data()[j].to_f64() + mom * mean[j]).collect(),
                    var: (0..n)
                        .map(|j| (1.0 - mom) * self.running_var.data()[j].to_f64() + mom * var[j] * unbiased)
                        .collect(),
                });
                (xhat, inv, true)
            }
            (NormKind::Batch, Mode::Eval) => {
                let inv: Vec<f64> = self.running_var.data().iter().map(|v| 1.0 / (v.to_f64() + eps).sqrt()).collect();
                let mean: Vec<f64> = self.running_mean.data().iter().map(|m| m.to_f64()).collect();
                let xhat = (0..rows * n).map(|k| (x[k] - mean[k % n]) * inv[k % n]).collect();
                (xhat, inv, false)
            }
            (NormKind::Layer, _) => {
                let mut xhat = Vec::with_capacity(rows * n);
                let mut inv = Vec::with_capacity(rows);
                for r in 0..rows {
                    let row = &x[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let is = 1.0 / (var + eps).sqrt();
                    xhat.extend(row.iter().map(|v| (v - mean) * is));
                    inv.push(is);
                }
                (xhat, inv, true)
            }
        };
        let y = if self.kind.has_affine() {
            xhat.iter()
                .enumerate()
                .map(|(k, &v)| self.gamma.data()[k % n].to_f64() * v + self.beta.data()[k % n].to_f64())
                .collect()
        } else {
            xhat.clone()
        };
        Ok((y, NormCache { rows, features: n, xhat, inv_std, input_stats }, update))
    }

    /// Forward pass that also applies the running-statistics update.
    pub fn forward_mut(&mut self, x: &[f64], rows: usize, mode: Mode) -> Result<(Vec<f64>, NormCache)> {
        let (y, cache, update) = self.forward(x, rows, mode)?;
        if let Some(u) = update {
            self.apply_update(&u);
        }
        Ok((y, cache))
    }

    pub fn apply_update(&mut self, update: &RunningUpdate) {
        for (dst, &v) in self.running_mean.data_mut().iter_mut().zip(&update.mean) {
            *dst = T::from_f64(v);
        }
        for (dst, &v) in self.running_var.data_mut().iter_mut().zip(&update.var) {
            *dst = T::from_f64(v.max(0.0));
        }
    }

    /// Vector-Jacobian product with respect to the input and the affine parameters.
    pub fn vjp(&self, cache: &NormCache, upstream: &[f64]) -> Result<NormGrads> {
        let (rows, n) = (cache.rows, cache.features);
        if upstream.len() != rows * n || n != self.features() {
            return Err(Error::usage("norm cache does not match the upstream gradient"));
        }
        if self.kind == NormKind::None {
            return Ok(NormGrads { input: upstream.to_vec(), gamma: Vec::new(), beta: Vec::new() });
        }
        let mut dgamma = vec![0.0; n];
        let mut dbeta = vec![0.0; n];
        let mut dxhat = vec![0.0; rows * n];
        for k in 0..rows * n {
            let j = k % n;
            dgamma[j] += upstream[k] * cache.xhat[k];
            dbeta[j] += upstream[k];
            dxhat[k] = upstream[k] * self.gamma.data()[j].to_f64();
        }
        let mut dx = vec![0.0; rows * n];
        match self.kind {
            NormKind::Batch if cache.input_stats => {
                let b = rows as f64;
                for j in 0..n {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for r in 0..rows {
                        s1 += dxhat[r * n + j];
                        s2 += dxhat[r * n + j] * cache.xhat[r * n + j];
                    }
                    for r in 0..rows {
                        let k = r * n + j;
                        dx[k] = cache.inv_std[j] / b * (b * dxhat[k] - s1 - cache.xhat[k] * s2);
                    }
                }
            }
            NormKind::Batch => {
                for k in 0..rows * n {
                    dx[k] = dxhat[k] * cache.inv_std[k % n];
                }
            }
            NormKind::Layer => {
                let m = n as f64;
                for r in 0..rows {
                    let span = r * n..(r + 1) * n;
                    let s1: f64 = dxhat[span.clone()].iter().sum();
                    let s2: f64 = dxhat[span.clone()].iter().zip(&cache.xhat[span.clone()]).map(|(a, b)| a * b).sum();
                    for k in span {
                        dx[k] = cache.inv_std[r] / m * (m * dxhat[k] - s1 - cache.xhat[k] * s2);
                    }
                }
            }
            NormKind::None => unreachable!(),
        }
        Ok(NormGrads { input: dx, gamma: dgamma, beta: dbeta })
    }
}
