//! Counterfactual expert ablation, polysemanticity scores, expert load,
//! logit rewriting and SVD weight truncation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layer::{map_experts, LayerConfig, LayerKind, MoeBlock, MoeLayer};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{truncate, Tensor};

/// Differences with magnitude at or below this count as zero.
pub const NONZERO_TOL: f64 = 1e-12;
pub const DEFAULT_LOAD_THRESHOLD: f64 = 0.5;

/// Per-class accuracy with the number of samples behind each entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    /// Accuracy in `[0, 1]`; 0 for classes with no samples.
    pub accuracy: Vec<f64>,
    pub support: Vec<usize>,
}

impl ClassAccuracy {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
        }
        let mut correct = vec![0usize; classes];
        let mut support = vec![0usize; classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if l >= classes {
                return Err(Error::Index(format!("label {l} outside 0..{classes}")));
            }
            support[l] += 1;
            correct[l] += usize::from(p == l);
        }
        let accuracy = correct
            .iter()
            .zip(&support)
            .map(|(&c, &s)| if s == 0 { 0.0 } else { c as f64 / s as f64 })
            .collect();
        Ok(ClassAccuracy { accuracy, support })
    }

    pub fn classes(&self) -> usize {
        self.accuracy.len()
    }

    /// Fraction of all samples classified correctly.
    pub fn overall(&self) -> f64 {
        let total: usize = self.support.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let correct: f64 = self.accuracy.iter().zip(&self.support).map(|(a, &s)| a * s as f64).sum();
        correct / total as f64
    }
}

/// Index of the largest logit in each row, lowest index on ties.
pub fn argmax_rows(logits: &Tensor<f64>) -> Vec<usize> {
    (0..logits.rows()).map(|b| argmax(logits.row(b))).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Normalized accuracy change `d_c = (y_c − ŷ_c) / y_c`.
///
/// Entries are `None` for classes without test samples or with zero baseline
/// accuracy; they take no part in scoring.
pub fn class_accuracy_diff(baseline: &ClassAccuracy, ablated: &ClassAccuracy) -> Result<Vec<Option<f64>>> {
    if baseline.classes() != ablated.classes() {
        return Err(Error::shape("accuracy vectors cover different class counts"));
    }
    Ok((0..baseline.classes())
        .map(|c| {
            let y = baseline.accuracy[c];
            (baseline.support[c] > 0 && y > 0.0).then(|| (y - ablated.accuracy[c]) / y)
        })
        .collect())
}

/// Class with the largest defined difference, lowest index on ties.
pub fn dominant_class(d: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, v) in d.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
    }
    best.map(|(c, _)| c)
}

/// `‖d − 𝟙‖₂` where `𝟙` is the one-hot vector at the dominant class.
/// Undefined entries are skipped.
pub fn polysemanticity_score(d: &[Option<f64>]) -> f64 {
    let Some(top) = dominant_class(d) else { return 0.0 };
    d.iter()
        .enumerate()
        .filter_map(|(c, v)| v.map(|v| if c == top { v - 1.0 } else { v }))
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// True when some defined entry exceeds [`NONZERO_TOL`] in magnitude.
pub fn alters_accuracy(d: &[Option<f64>]) -> bool {
    d.iter().flatten().any(|v| v.abs() > NONZERO_TOL)
}

/// Samples whose coefficient for each expert meets `threshold`.
pub fn expert_load(coeffs: &Tensor<f64>, threshold: f64) -> Vec<usize> {
    let mut counts = vec![0usize; coeffs.cols()];
    for b in 0..coeffs.rows() {
        for (n, &a) in coeffs.row(b).iter().enumerate() {
            counts[n] += usize::from(a >= threshold);
        }
    }
    counts
}

pub fn dead_experts(load: &[usize]) -> Vec<usize> {
    load.iter().enumerate().filter(|(_, &c)| c == 0).map(|(n, _)| n).collect()
}

/// Mean coefficient vector `ā` of the rows in `subset`.
pub fn mean_subpop_coefficients(coeffs: &Tensor<f64>, subset: &[usize]) -> Result<Vec<f64>> {
    if subset.is_empty() {
        return Err(Error::usage("cannot average the coefficients of an empty subset"));
    }
    let mut mean = vec![0.0; coeffs.cols()];
    for &b in subset {
        if b >= coeffs.rows() {
            return Err(Error::Index(format!("row {b} outside 0..{}", coeffs.rows())));
        }
        for (m, a) in mean.iter_mut().zip(coeffs.row(b)) {
            *m += a;
        }
    }
    let k = subset.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

/// Additive correction `λ (ā · a)` on output head `head`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewriteTerm {
    pub head: usize,
    pub mean: Vec<f64>,
    pub lambda: f64,
}

impl RewriteTerm {
    /// Term with `λ = sign · N`, `N` being the length of `mean`.
    pub fn with_default_scale(head: usize, mean: Vec<f64>, sign: f64) -> Self {
        let lambda = sign.signum() * mean.len() as f64;
        RewriteTerm { head, mean, lambda }
    }

    pub fn shift(&self, a: &[f64]) -> f64 {
        self.lambda * self.mean.iter().zip(a).map(|(m, x)| m * x).sum::<f64>()
    }
}

/// Corrected logit `y_o + λ (ā · a)`.
pub fn rewrite_logit(y_o: f64, term: &RewriteTerm, a: &[f64]) -> Result<f64> {
    if a.len() != term.mean.len() {
        return Err(Error::shape(format!("coefficients of length {} against a mean of length {}", a.len(), term.mean.len())));
    }
    Ok(y_o + term.shift(a))
}

/// Applies the rewrite to every row of `logits` using matching coefficient rows.
pub fn rewrite_logits(logits: &mut Tensor<f64>, coeffs: &Tensor<f64>, term: &RewriteTerm) -> Result<()> {
    if term.head >= logits.cols() {
        return Err(Error::Index(format!("head {} outside 0..{}", term.head, logits.cols())));
    }
    if coeffs.rows() != logits.rows() || coeffs.cols() != term.mean.len() {
        return Err(Error::shape("coefficients do not match the logits or the rewrite mean"));
    }
    for b in 0..logits.rows() {
        let y = logits.row(b)[term.head];
        logits.row_mut(b)[term.head] = rewrite_logit(y, term, coeffs.row(b))?;
    }
    Ok(())
}

/// Single-level coefficients of the output layer for each row of `x`.
pub fn head_coefficients<T: Scalar>(model: &Model<T>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let input = match &model.block {
        Some(b) => b.predict(x)?,
        None => x.clone(),
    };
    let mut c = model.head.coefficients(&input, crate::norm::Mode::Eval)?;
    if c.levels.len() != 1 {
        return Err(Error::usage("rewriting needs a single-level output layer"));
    }
    Ok(c.levels.swap_remove(0))
}

/// Eval-mode logits of `model` with the rewrite applied to the output layer.
pub fn rewritten_logits<T: Scalar>(model: &Model<T>, x: &Tensor<f64>, term: &RewriteTerm) -> Result<Tensor<f64>> {
    let mut logits = model.predict(x)?;
    rewrite_logits(&mut logits, &head_coefficients(model, x)?, term)?;
    Ok(logits)
}

/// Number of singular triples kept: `⌈f · min(I, O)⌉`.
///
/// The product is nudged down by `1e−9` so that fractions like `0.3 · 10`
/// do not round up through representation error.
pub fn kept_triples(fraction: f64, rows: usize, cols: usize) -> usize {
    let m = rows.min(cols);
    ((fraction * m as f64 - 1e-9).ceil().max(0.0) as usize).min(m)
}

/// Best rank-`⌈f · min(I, O)⌉` approximation of `m`.
pub fn svd_ablate(m: &Tensor<f64>, keep_fraction: f64) -> Result<Tensor<f64>> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::Domain(format!("keep fraction {keep_fraction} outside [0, 1]")));
    }
    if m.order() != 2 {
        return Err(Error::shape("svd_ablate expects a matrix"));
    }
    truncate(m, kept_triples(keep_fraction, m.rows(), m.cols()))
}

/// Truncates the weight part of a folded expert matrix, leaving the bias row.
fn ablate_expert_matrix(w: &Tensor<f64>, cfg: &LayerConfig, keep_fraction: f64) -> Result<Tensor<f64>> {
    if !cfg.bias {
        return svd_ablate(w, keep_fraction);
    }
    let (i, o) = (cfg.input_dim, cfg.output_dim);
    let weight = Tensor::matrix(i, o, w.data()[..i * o].to_vec())?;
    let mut data = svd_ablate(&weight, keep_fraction)?.into_data();
    data.extend_from_slice(&w.data()[i * o..]);
    Tensor::matrix(i + 1, o, data)
}

fn svd_ablate_layer<T: Scalar>(layer: &MoeLayer<T>, keep_fraction: f64) -> Result<MoeLayer<T>> {
    let cfg = layer.config.clone();
    layer.map_experts(|w| ablate_expert_matrix(w, &cfg, keep_fraction))
}

/// Copy of `block` with the expert weight matrices of both layers truncated
/// by [`svd_ablate`]. Folded bias rows are kept as they are.
pub fn svd_ablate_block<T: Scalar>(block: &MoeBlock<T>, keep_fraction: f64) -> Result<MoeBlock<T>> {
    let mut out = block.clone();
    out.first = map_experts(&block.first_config, &block.first, |w| ablate_expert_matrix(w, &block.first_config, keep_fraction))?;
    out.second = map_experts(&block.second_config, &block.second, |w| ablate_expert_matrix(w, &block.second_config, keep_fraction))?;
    out.first_config.kind = LayerKind::Dense;
    out.second_config.kind = LayerKind::Dense;
    Ok(out)
}

/// Copy of `model` with every expert weight matrix of the block and the
/// head truncated by [`svd_ablate`].
pub fn svd_ablate_model<T: Scalar>(model: &Model<T>, keep_fraction: f64) -> Result<Model<T>> {
    let block = model.block.as_ref().map(|b| svd_ablate_block(b, keep_fraction)).transpose()?;
    Ok(Model { block, head: svd_ablate_layer(&model.head, keep_fraction)? })
}

/// Per-class accuracy of eval-mode predictions.
pub fn accuracy<T: Scalar>(model: &Model<T>, x: &Tensor<f64>, labels: &[usize]) -> Result<ClassAccuracy> {
    ClassAccuracy::from_predictions(&argmax_rows(&model.predict(x)?), labels, model.classes())
}

/// Ablation outcome for one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertReport {
    pub expert: usize,
    pub diff: Vec<Option<f64>>,
    pub argmax_class: Option<usize>,
    pub score: f64,
    pub load: usize,
}

/// Ablation outcomes for every expert of a single-level routing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolysemanticityReport {
    pub baseline: ClassAccuracy,
    pub experts: Vec<ExpertReport>,
}

impl PolysemanticityReport {
    /// Experts whose ablation changed some class accuracy.
    pub fn active(&self) -> impl Iterator<Item = &ExpertReport> {
        self.experts.iter().filter(|e| alters_accuracy(&e.diff))
    }

    /// Mean score over [`PolysemanticityReport::active`] experts.
    pub fn mean_score(&self) -> Option<f64> {
        let scores: Vec<f64> = self.active().map(|e| e.score).collect();
        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
    }

    pub fn dead(&self) -> Vec<usize> {
        self.experts.iter().filter(|e| e.load == 0).map(|e| e.expert).collect()
    }

    /// Tab-separated table with a header and one row per expert.
    /// Experts without a dominant class print `-` in that column.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("expert_index\targmax_class\tp_score\tload_count\n");
        for e in &self.experts {
            let class = e.argmax_class.map_or_else(|| "-".to_string(), |c| c.to_string());
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", e.expert, class, e.score, e.load);
        }
        out
    }
}

/// Ablates each expert of the routing layer in turn and scores the
/// per-class accuracy changes on `(x, labels)`.
pub fn intervene<T: Scalar>(model: &Model<T>, x: &Tensor<f64>, labels: &[usize], threshold: f64) -> Result<PolysemanticityReport> {
    let experts = model.experts();
    if experts.len() != 1 {
        return Err(Error::usage("intervention scoring needs a single-level routing layer"));
    }
    let baseline = accuracy(model, x, labels)?;
    let load = expert_load(&model.routing(x)?.levels[0], threshold);
    let reports = (0..experts[0])
        .into_par_iter()
        .map(|n| {
            let ablated = accuracy(&model.ablate(0, n)?, x, labels)?;
            let diff = class_accuracy_diff(&baseline, &ablated)?;
            Ok(ExpertReport { expert: n, argmax_class: dominant_class(&diff), score: polysemanticity_score(&diff), load: load[n], diff })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolysemanticityReport { baseline, experts: reports })
}
