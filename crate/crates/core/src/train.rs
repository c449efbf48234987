//! Cross-entropy loss, SGD/Adam optimizers and a seeded minibatch loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{accuracy, argmax_rows, ClassAccuracy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::norm::NormKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean negative log-softmax of the true class and its gradient
/// `(softmax − onehot) / B`.
pub fn cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Tensor<f64>)> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows of logits", labels.len())));
    }
    let mut grad = Tensor::zeros(&[b, c]);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Index(format!("label {y} outside 0..{c}")));
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[y];
        let g = grad.row_mut(i);
        for (k, v) in row.iter().enumerate() {
            g[k] = ((v - lse).exp() - f64::from(u8::from(k == y))) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimKind {
    SgdMomentum,
    #[default]
    Adam,
}

impl OptimKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimKind::SgdMomentum => "sgd",
            OptimKind::Adam => "adam",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            OptimKind::SgdMomentum => 0,
            OptimKind::Adam => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OptimKind::SgdMomentum),
            1 => Some(OptimKind::Adam),
            _ => None,
        }
    }
}

impl std::str::FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd_momentum" => Ok(OptimKind::SgdMomentum),
            "adam" => Ok(OptimKind::Adam),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Optimizer hyperparameters and per-parameter state.
///
/// SGD keeps one velocity slot, `v ← β₁ v + g`, `θ ← θ − lr v`.
/// Adam keeps first and second moments with bias correction.
/// All arithmetic is in `f64`; stored parameters are rounded back to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-3)
    }
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer { kind: OptimKind::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer { kind: OptimKind::SgdMomentum, lr, beta1: momentum, beta2: 0.0, eps: 0.0, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (self.kind == OptimKind::SgdMomentum || ((0.0..1.0).contains(&self.beta2) && self.eps > 0.0));
        if !ok {
            return Err(Error::config("optimizer hyperparameters out of range"));
        }
        Ok(())
    }

    /// Forgets all accumulated state.
    pub fn reset(&mut self) {
        self.step = 0;
        self.first.clear();
        self.second.clear();
    }

    /// One update of `params` with `grads`, in matching order and shapes.
    pub fn apply<T: Scalar>(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("parameter {:?} against gradient {:?}", p.shape(), g.shape())));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if self.kind == OptimKind::Adam {
                self.second = self.first.clone();
            }
        } else if self.first.len() != grads.len() || self.first.iter().zip(grads).any(|(s, g)| s.len() != g.len()) {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        self.step += 1;
        match self.kind {
            OptimKind::SgdMomentum => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vi = self.beta1 * *vi + gi;
                        *w = T::from_f64(w.to_f64() - self.lr * *vi);
                    }
                }
            }
            OptimKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        let update = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                        *w = T::from_f64(w.to_f64() - update);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the samples seen this epoch.
    pub loss: f64,
    /// Losses of the individual minibatches, in order.
    pub batch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

pub fn metrics_tsv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch\tloss\ttrain_accuracy\ttest_accuracy\n");
    for m in metrics {
        let test = m.test_accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{test}", m.epoch, m.loss, m.train_accuracy);
    }
    out
}

fn uses_batch_norm<T: Scalar>(model: &Model<T>) -> bool {
    let head = model.head.config.gate_norm == NormKind::Batch;
    head || model.block.as_ref().is_some_and(|b| b.first_config.gate_norm == NormKind::Batch)
}

/// Minibatch training on the rows of `train`.
///
/// Rows are reshuffled every epoch from one seeded stream. With batch
/// normalization in the gating, a trailing batch of a single row is skipped
/// since its batch variance is degenerate. After every epoch the model is
/// evaluated in eval mode on `train` and, when given, on `test`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    optimizer: &mut Optimizer,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if train.input_dim() != model.input_dim() || train.classes > model.classes() {
        return Err(Error::shape(format!(
            "dataset has {} features and {} classes, model expects {} and {}",
            train.input_dim(),
            train.classes,
            model.input_dim(),
            model.classes()
        )));
    }
    let min_batch = if uses_batch_norm(model) { 2 } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let batch = train.subset(chunk);
            let (logits, cache) = model.forward_train(&batch.inputs)?;
            let (loss, dlogits) = cross_entropy(&logits, &batch.labels)?;
            let grads = model.backward(&cache, &dlogits)?;
            optimizer.apply(model.params_mut(), &grads.params)?;
            batch_losses.push(loss);
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let loss = if seen == 0 { 0.0 } else { total / seen as f64 };
        if !loss.is_finite() {
            return Err(Error::Domain(format!("training loss diverged at epoch {epoch}")));
        }
        let train_accuracy = evaluate_per_class(model, train)?.overall();
        let test_accuracy = match test {
            Some(t) if !t.is_empty() => Some(evaluate_per_class(model, t)?.overall()),
            _ => None,
        };
        history.push(EpochMetrics { epoch, loss, batch_losses, train_accuracy, test_accuracy });
    }
    Ok(history)
}

/// Eval-mode per-class accuracy on every row of `data`.
pub fn evaluate_per_class<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<ClassAccuracy> {
    if data.is_empty() {
        return Ok(ClassAccuracy { accuracy: vec![0.0; data.classes], support: vec![0; data.classes] });
    }
    if data.classes > model.classes() {
        return Err(Error::shape(format!("dataset has {} classes but the model predicts {}", data.classes, model.classes())));
    }
    let acc = accuracy(model, &data.inputs, &data.labels)?;
    Ok(ClassAccuracy { accuracy: acc.accuracy[..data.classes].to_vec(), support: acc.support[..data.classes].to_vec() })
}

pub fn predictions<T: Scalar>(model: &Model<T>, x: &Tensor<f64>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.predict(x)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::zeros(&[3, 5]);
        let (loss, _) = cross_entropy(&logits, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn sgd_hand_step() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let g = Tensor::vector(vec![0.5, 3.0]).unwrap();
        let mut opt = Optimizer::sgd(0.1, 0.9);
        opt.apply(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 3.0]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        for scale in [1e-4, 1.0, 1e4] {
            let mut p: Tensor<f64> = Tensor::vector(vec![0.0, 0.0]).unwrap();
            let g: Tensor<f64> = Tensor::vector(vec![scale, -scale]).unwrap();
            let mut opt = Optimizer::adam(1e-3);
            opt.apply(vec![&mut p], &[g]).unwrap();
            for v in p.data() {
                assert!((v.abs() - 1e-3).abs() < 1e-6, "{v}");
            }
        }
    }
}
