use crate::activation::GateActivation;
use crate::error::{Error, Result};
use crate::norm::{Mode, NormCache, NormKind, NormState, RunningUpdate};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-level expert coefficients, each a `B × N_e` matrix of simplex rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub levels: Vec<Tensor<f64>>,
}

impl Coefficients {
    pub fn rows(&self) -> usize {
        self.levels[0].rows()
    }

    /// Coefficient vector of sample `b` at level `e` (0-based).
    pub fn row(&self, e: usize, b: usize) -> &[f64] {
        self.levels[e].row(b)
    }

    /// Copy with the given `(level, expert)` columns set to zero.
    pub fn masked(&self, ablated: &[(usize, usize)]) -> Coefficients {
        let mut out = self.clone();
        for &(e, n) in ablated {
            let t = &mut out.levels[e];
            let width = t.cols();
            for b in 0..t.rows() {
                t.data_mut()[b * width + n] = 0.0;
            }
        }
        out
    }
}

/// Gating parameters: one `I × N_e` matrix and one normalization per level.
///
/// Every level reads the same layer input: `a_e = φ(norm(z G_e))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gating<T = f64> {
    pub weights: Vec<Tensor<T>>,
    pub norms: Vec<NormState<T>>,
    pub activation: GateActivation,
}

#[derive(Debug, Clone)]
pub struct GateCache {
    norms: Vec<NormCache>,
    coeffs: Coefficients,
}

impl GateCache {
    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }
}

impl<T: Scalar> Gating<T> {
    /// Zero-initialized gating for `experts` levels over an `input_dim` input.
    pub fn zeros(input_dim: usize, experts: &[usize], activation: GateActivation, norm: NormKind, eps: f64, momentum: f64) -> Self {
        Gating {
            weights: experts.iter().map(|&n| Tensor::zeros(&[input_dim, n])).collect(),
            norms: experts.iter().map(|&n| NormState::with_hyper(norm, n, eps, momentum)).collect(),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn experts(&self) -> Vec<usize> {
        self.weights.iter().map(|g| g.cols()).collect()
    }

    pub fn forward(&self, z: &Tensor<f64>, mode: Mode) -> Result<(Coefficients, GateCache, Vec<Option<RunningUpdate>>)> {
        let i = self.input_dim();
        if z.order() != 2 || z.cols() != i {
            return Err(Error::shape(format!("gating expects a B×{i} input, got {:?}", z.shape())));
        }
        let b = z.rows();
        let mut levels = Vec::with_capacity(self.weights.len());
        let mut caches = Vec::with_capacity(self.weights.len());
        let mut updates = Vec::with_capacity(self.weights.len());
        for (g, norm) in self.weights.iter().zip(&self.norms) {
            let n = g.cols();
            let mut logits = vec![0.0; b * n];
            for r in 0..b {
                let zr = z.row(r);
                let out = &mut logits[r * n..(r + 1) * n];
                for (k, &zk) in zr.iter().enumerate() {
                    for (o, gv) in out.iter_mut().zip(g.row(k)) {
                        *o += zk * gv.to_f64();
                    }
                }
            }
            let (normed, cache, update) = norm.forward(&logits, b, mode)?;
            let mut probs = Vec::with_capacity(b * n);
            for r in 0..b {
                probs.extend(self.activation.forward(&normed[r * n..(r + 1) * n])?);
            }
            levels.push(Tensor::matrix(b, n, probs)?);
            caches.push(cache);
            updates.push(update);
        }
        let coeffs = Coefficients { levels };
        Ok((coeffs.clone(), GateCache { norms: caches, coeffs }, updates))
    }

    pub fn apply_updates(&mut self, updates: &[Option<RunningUpdate>]) {
        for (norm, u) in self.norms.iter_mut().zip(updates) {
            if let Some(u) = u {
                norm.apply_update(u);
            }
        }
    }

    /// Gradients of all gating parameters (in [`Gating::params`] order) and of
    /// the input, given upstream gradients on each level's coefficients.
    pub fn backward(&self, z: &Tensor<f64>, cache: &GateCache, dcoeffs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let (b, i) = (z.rows(), self.input_dim());
        if cache.coeffs.rows() != b || dcoeffs.len() != self.weights.len() {
            return Err(Error::usage("gating cache does not match the current batch"));
        }
        let mut grads = Vec::new();
        let mut dz = vec![0.0; b * i];
        for (e, (g, norm)) in self.weights.iter().zip(&self.norms).enumerate() {
            let n = g.cols();
            if dcoeffs[e].len() != b * n {
                return Err(Error::usage("coefficient gradient has the wrong size"));
            }
            let mut dnormed = Vec::with_capacity(b * n);
            for r in 0..b {
                dnormed.extend(self.activation.vjp(cache.coeffs.row(e, r), &dcoeffs[e][r * n..(r + 1) * n]));
            }
            let ng = norm.vjp(&cache.norms[e], &dnormed)?;
            let dlogits = ng.input;
            let mut dg = vec![0.0; i * n];
            for r in 0..b {
                let zr = z.row(r);
                let dl = &dlogits[r * n..(r + 1) * n];
                for k in 0..i {
                    let grow = g.row(k);
                    let mut acc = 0.0;
                    for c in 0..n {
                        dg[k * n + c] += zr[k] * dl[c];
                        acc += dl[c] * grow[c].to_f64();
                    }
                    dz[r * i + k] += acc;
                }
            }
            grads.push(dg);
            if norm.kind.has_affine() {
                grads.push(ng.gamma);
                grads.push(ng.beta);
            }
        }
        Ok((grads, dz))
    }

    /// Learnable tensors with their names, level indices starting at 1.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (e, (g, norm)) in self.weights.iter().zip(&self.norms).enumerate() {
            out.push((format!("gate.{}.weight", e + 1), g));
            if norm.kind.has_affine() {
                out.push((format!("gate.{}.norm.gamma", e + 1), &norm.gamma));
                out.push((format!("gate.{}.norm.beta", e + 1), &norm.beta));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (g, norm) in self.weights.iter_mut().zip(self.norms.iter_mut()) {
            out.push(g);
            if norm.kind.has_affine() {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        }
        out
    }

    /// Non-learnable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (e, norm) in self.norms.iter().enumerate() {
            if norm.kind == NormKind::Batch {
                out.push((format!("gate.{}.norm.running_mean", e + 1), &norm.running_mean));
                out.push((format!("gate.{}.norm.running_var", e + 1), &norm.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for norm in self.norms.iter_mut() {
            if norm.kind == NormKind::Batch {
                out.push(&mut norm.running_mean);
                out.push(&mut norm.running_var);
            }
        }
        out
    }
}
