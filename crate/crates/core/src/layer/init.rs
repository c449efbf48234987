use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Gating, LayerConfig, LayerKind, MoeBlock, MoeLayer, Weights};
use crate::activation::Pointwise;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FactorMatrix, Tensor, TrCore};

/// Initialization settings.
///
/// Expert-mode parameters are drawn around 1 with standard deviation
/// `sigma[e]` for level `e`, so every expert starts as a perturbed copy of one
/// shared matrix. Levels without an explicit entry use 1 for the first level
/// and 0 for deeper ones.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub seed: u64,
    pub sigma: Vec<f64>,
}

impl InitConfig {
    pub fn new(seed: u64) -> Self {
        InitConfig { seed, sigma: Vec::new() }
    }

    pub fn with_sigma(mut self, sigma: &[f64]) -> Self {
        self.sigma = sigma.to_vec();
        self
    }

    pub fn sigma_for(&self, level: usize) -> f64 {
        self.sigma.get(level).copied().unwrap_or(if level == 0 { 1.0 } else { 0.0 })
    }

    fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("init sigma values must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Uniform `U[−√k, √k]` with `k = 1 / fan_in`.
fn uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)))
}

fn around_one(sigma: f64) -> Normal<f64> {
    Normal::new(1.0, sigma).expect("sigma validated as finite and non-negative")
}

pub(crate) fn init_gating<T: Scalar>(cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> Gating<T> {
    let mut g = Gating::zeros(cfg.input_dim, &cfg.experts, cfg.gate_activation, cfg.gate_norm, cfg.norm_eps, cfg.norm_momentum);
    for w in g.weights.iter_mut() {
        *w = uniform(w.shape(), cfg.input_dim, rng);
    }
    g
}

pub(crate) fn init_weights<T: Scalar>(cfg: &LayerConfig, init: &InitConfig, rng: &mut ChaCha8Rng) -> Weights<T> {
    let e = cfg.levels();
    let (i, o) = (cfg.folded_input(), cfg.output_dim);
    match cfg.kind {
        LayerKind::Dense => {
            // one shared matrix, replicated across the grid with a per-expert scale per level
            let base: Tensor<f64> = uniform(&[i, o], i, rng);
            let scales: Vec<Vec<f64>> = cfg
                .experts
                .iter()
                .enumerate()
                .map(|(l, &n)| {
                    let d = around_one(init.sigma_for(l));
                    (0..n).map(|_| d.sample(rng)).collect()
                })
                .collect();
            Weights::Dense(Tensor::from_fn(&cfg.tensor_shape(), |ix| {
                let s: f64 = (0..e).map(|l| scales[l][ix[l]]).product();
                T::from_f64(s * base.get(&[ix[e], ix[e + 1]]))
            }))
        }
        LayerKind::Cp => {
            let r = cfg.cp_rank;
            let mut factors = Vec::with_capacity(e + 2);
            for (l, &n) in cfg.experts.iter().enumerate() {
                let d = around_one(init.sigma_for(l));
                factors.push(FactorMatrix(Tensor::from_fn(&[r, n], |_| T::from_f64(d.sample(rng)))));
            }
            factors.push(FactorMatrix(uniform(&[r, i], i, rng)));
            factors.push(FactorMatrix(uniform(&[r, o], r, rng)));
            Weights::Cp(factors)
        }
        LayerKind::Tr => {
            let ranks = &cfg.tr_ranks;
            let next = |k: usize| ranks[(k + 1) % ranks.len()];
            let mut cores = Vec::with_capacity(e + 2);
            for (l, &n) in cfg.experts.iter().enumerate() {
                let d = around_one(init.sigma_for(l));
                let (ri, ro) = (ranks[l], next(l));
                cores.push(TrCore(Tensor::from_fn(&[ri, n, ro], |ix| {
                    if ix[0] == ix[2] {
                        T::from_f64(d.sample(rng))
                    } else {
                        T::zero()
                    }
                })));
            }
            cores.push(TrCore(uniform(&[ranks[e], i, next(e)], i, rng)));
            let closing_fan_in = ranks[0] * ranks[e + 1];
            cores.push(TrCore(uniform(&[ranks[e + 1], o, ranks[0]], closing_fan_in, rng)));
            Weights::Tr(cores)
        }
    }
}

/// Builds a layer with seeded random parameters. Gating is drawn first, then
/// the expert weights, from one ChaCha8 stream.
pub fn init_layer<T: Scalar>(cfg: &LayerConfig, init: &InitConfig) -> Result<MoeLayer<T>> {
    cfg.validate()?;
    init.validate()?;
    let mut rng = init.rng();
    let gating = init_gating(cfg, &mut rng);
    let weights = init_weights(cfg, init, &mut rng);
    MoeLayer::from_parts(cfg.clone(), gating, weights)
}

/// Builds a two-layer block whose gating is configured by `first`.
pub fn init_block<T: Scalar>(first: &LayerConfig, second: &LayerConfig, activation: Pointwise, init: &InitConfig) -> Result<MoeBlock<T>> {
    first.validate()?;
    second.validate()?;
    init.validate()?;
    let mut rng = init.rng();
    let gating = init_gating(first, &mut rng);
    let w1 = init_weights(first, init, &mut rng);
    let w2 = init_weights(second, init, &mut rng);
    MoeBlock::from_parts(first.clone(), second.clone(), gating, w1, w2, activation)
}
