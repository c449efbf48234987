//! Central finite-difference checks of hand-written backward passes.
//!
//! The scalar probed is `L = Σ Y ⊙ U` for a fixed upstream matrix `U`, so the
//! analytic gradients are exactly what `backward(cache, U)` returns. Forward
//! passes run in training mode without applying running-statistic updates.

use crate::error::Result;
use crate::layer::{Gradients, MoeBlock, MoeLayer};
use crate::norm::Mode;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// A differentiable map from a `B × I` batch to a `B × O` batch.
pub trait GradTarget: Clone {
    fn output(&self, z: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn gradients(&self, z: &Tensor<f64>, upstream: &Tensor<f64>) -> Result<Gradients>;
    fn param_names(&self) -> Vec<String>;
    fn param_mut(&mut self, k: usize) -> &mut Tensor<f64>;
}

impl GradTarget for MoeLayer<f64> {
    fn output(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.forward(z, Mode::Training)?.output)
    }

    fn gradients(&self, z: &Tensor<f64>, upstream: &Tensor<f64>) -> Result<Gradients> {
        let out = self.forward(z, Mode::Training)?;
        self.backward(&out.cache, upstream)
    }

    fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    fn param_mut(&mut self, k: usize) -> &mut Tensor<f64> {
        self.params_mut().swap_remove(k)
    }
}

impl GradTarget for MoeBlock<f64> {
    fn output(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.forward(z, Mode::Training)?.output)
    }

    fn gradients(&self, z: &Tensor<f64>, upstream: &Tensor<f64>) -> Result<Gradients> {
        let out = self.forward(z, Mode::Training)?;
        self.backward(&out.cache, upstream)
    }

    fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    fn param_mut(&mut self, k: usize) -> &mut Tensor<f64> {
        self.params_mut().swap_remove(k)
    }
}

/// Agreement between analytic and numerical gradients for one tensor.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or 0 when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn compare(name: String, analytic: &[f64], numeric: &[f64]) -> GroupCheck {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    let rel_error = if scale == 0.0 { 0.0 } else { diff / scale };
    let max_abs_error = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    GroupCheck { name, rel_error, max_abs_error }
}

/// Checks every parameter tensor and the input gradient of `target`.
pub fn check<G: GradTarget>(target: &G, z: &Tensor<f64>, upstream: &Tensor<f64>, step: f64) -> Result<Vec<GroupCheck>> {
    let analytic = target.gradients(z, upstream)?;
    let names = target.param_names();
    let mut out = Vec::with_capacity(names.len() + 1);
    for (k, name) in names.into_iter().enumerate() {
        let len = analytic.params[k].len();
        let mut numeric = vec![0.0; len];
        let mut probe = target.clone();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.param_mut(k).data()[j];
            probe.param_mut(k).data_mut()[j] = orig + step;
            let plus = dot(&probe.output(z)?, upstream);
            probe.param_mut(k).data_mut()[j] = orig - step;
            let minus = dot(&probe.output(z)?, upstream);
            probe.param_mut(k).data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        out.push(compare(name, analytic.params[k].data(), &numeric));
    }
    let mut numeric = vec![0.0; z.len()];
    let mut zp = z.clone();
    for (j, slot) in numeric.iter_mut().enumerate() {
        let orig = z.data()[j];
        zp.data_mut()[j] = orig + step;
        let plus = dot(&target.output(&zp)?, upstream);
        zp.data_mut()[j] = orig - step;
        let minus = dot(&target.output(&zp)?, upstream);
        zp.data_mut()[j] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    out.push(compare("input".to_string(), analytic.input.data(), &numeric));
    Ok(out)
}
