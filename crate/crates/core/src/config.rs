//! Plain-text experiment and dataset configuration.
//!
//! Files are line-oriented `key = value` pairs. Blank lines and text after
//! `#` are ignored; unknown or repeated keys are errors. Lists are
//! comma-separated.

use std::collections::BTreeMap;
use std::path::Path;

use crate::activation::{GateActivation, Pointwise};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::layer::{init_block, init_layer, InitConfig, LayerConfig, LayerKind};
use crate::model::Model;
use crate::norm::NormKind;
use crate::scalar::{Dtype, Scalar};
use crate::train::{OptimKind, Optimizer, TrainConfig};

/// Raw `key = value` pairs with line numbers for error messages.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::config(format!("line {}: empty key or value", i + 1)));
            }
            if entries.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
                return Err(Error::config(format!("line {}: key {k:?} given twice", i + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn required<V>(&mut self, key: &str, parse: impl Fn(&str) -> Option<V>) -> Result<V> {
        match self.take(key) {
            Some((line, v)) => parse(&v).ok_or_else(|| Error::config(format!("line {line}: malformed value {v:?} for {key}"))),
            None => Err(Error::config(format!("missing required key {key:?}"))),
        }
    }

    fn optional<V>(&mut self, key: &str, parse: impl Fn(&str) -> Option<V>) -> Result<Option<V>> {
        match self.take(key) {
            Some((line, v)) => parse(&v).map(Some).ok_or_else(|| Error::config(format!("line {line}: malformed value {v:?} for {key}"))),
            None => Ok(None),
        }
    }

    fn parsed<V: std::str::FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        self.optional(key, |s| s.parse().ok())
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((k, (line, _))) => Err(Error::config(format!("line {line}: unknown key {k:?}"))),
            None => Ok(()),
        }
    }
}

fn positive(s: &str) -> Option<usize> {
    s.parse::<usize>().ok().filter(|&v| v > 0)
}

fn positive_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| positive(p.trim())).collect()
}

fn count_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn float_list(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite())).collect()
}

fn boolean(s: &str) -> Option<bool> {
    match s {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn dtype(s: &str) -> Option<Dtype> {
    match s {
        "f32" => Some(Dtype::F32),
        "f64" => Some(Dtype::F64),
        _ => None,
    }
}

fn pointwise(s: &str) -> Option<Pointwise> {
    match s {
        "gelu" => Some(Pointwise::Gelu),
        "relu" => Some(Pointwise::Relu),
        "identity" => Some(Pointwise::Identity),
        _ => None,
    }
}

/// Optional hidden block in front of the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub first: LayerConfig,
    pub second: LayerConfig,
    pub activation: Pointwise,
}

/// Everything needed to build and train a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// The output layer.
    pub layer: LayerConfig,
    pub block: Option<BlockSpec>,
    pub init: InitConfig,
    pub dtype: Dtype,
    pub train: TrainConfig,
    pub optimizer: Optimizer,
    /// `rank` as given, whatever the layer kind.
    pub cp_rank: Option<usize>,
    /// `ranks` as given, whatever the layer kind.
    pub tr_ranks: Option<Vec<usize>>,
}

/// Keys and defaults:
///
/// | key | required | default |
/// |-----|----------|---------|
/// | `kind` | yes | `dense`, `cp` or `tr` |
/// | `input_dim`, `output_dim` | yes | |
/// | `experts` | yes | list, one count per level |
/// | `rank` (cp) / `ranks` (tr) | yes for that kind | |
/// | `gate_activation` | yes | `entmax15` or `softmax` |
/// | `gate_norm` | yes | `none`, `batch` or `layer` |
/// | `seed` | yes | |
/// | `bias` | no | `true` |
/// | `norm_eps`, `norm_momentum` | no | `1e-5`, `0.1` |
/// | `sigma` | no | `1` on the first level, `0` deeper |
/// | `dtype` | no | `f64` |
/// | `epochs`, `batch_size` | no | `50`, `32` |
/// | `optimizer`, `lr` | no | `adam`, `1e-3` |
/// | `momentum` (sgd), `beta1`, `beta2`, `adam_eps` | no | `0.9`, `0.9`, `0.999`, `1e-8` |
/// | `hidden_dim` | no | no block |
/// | `block_kind`, `block_experts`, `block_rank`, `block_ranks` | no | same as the output layer |
/// | `block_activation` | no | `gelu` |
///
/// With `hidden_dim = H` the model is a block `input_dim → H → input_dim`
/// followed by the output layer.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut kv = KeyValues::parse(text)?;
    let kind: LayerKind = kv.required("kind", |s| s.parse().ok())?;
    let input_dim = kv.required("input_dim", positive)?;
    let output_dim = kv.required("output_dim", positive)?;
    let experts = kv.required("experts", positive_list)?;
    let rank = kv.optional("rank", positive)?;
    let ranks = kv.optional("ranks", positive_list)?;
    let gate_activation: GateActivation = kv.required("gate_activation", |s| s.parse().ok())?;
    let gate_norm: NormKind = kv.required("gate_norm", |s| s.parse().ok())?;
    let seed: u64 = kv.required("seed", |s| s.parse().ok())?;
    let bias = kv.optional("bias", boolean)?.unwrap_or(true);
    let norm_eps = kv.optional("norm_eps", finite)?;
    let norm_momentum = kv.optional("norm_momentum", finite)?;
    let sigma = kv.optional("sigma", float_list)?.unwrap_or_default();
    let dtype = kv.optional("dtype", dtype)?.unwrap_or(Dtype::F64);
    let defaults = TrainConfig::default();
    let epochs = kv.parsed("epochs")?.unwrap_or(defaults.epochs);
    let batch_size = kv.optional("batch_size", positive)?.unwrap_or(defaults.batch_size);
    let optim: OptimKind = kv.optional("optimizer", |s| s.parse().ok())?.unwrap_or_default();
    let lr = kv.optional("lr", finite)?.unwrap_or(1e-3);
    let momentum = kv.optional("momentum", finite)?;
    let beta1 = kv.optional("beta1", finite)?;
    let beta2 = kv.optional("beta2", finite)?;
    let adam_eps = kv.optional("adam_eps", finite)?;
    let hidden_dim = kv.optional("hidden_dim", positive)?;
    let block_kind: Option<LayerKind> = kv.optional("block_kind", |s| s.parse().ok())?;
    let block_experts = kv.optional("block_experts", positive_list)?;
    let block_rank = kv.optional("block_rank", positive)?;
    let block_ranks = kv.optional("block_ranks", positive_list)?;
    let block_activation = kv.optional("block_activation", pointwise)?;
    kv.finish()?;

    let make = |kind: LayerKind, i: usize, o: usize, experts: &[usize], rank: Option<usize>, ranks: &Option<Vec<usize>>| -> Result<LayerConfig> {
        let mut cfg = match kind {
            LayerKind::Dense => LayerConfig::dense(i, o, experts),
            LayerKind::Cp => LayerConfig::cp(i, o, experts, rank.ok_or_else(|| Error::config("cp layers need `rank`"))?),
            LayerKind::Tr => LayerConfig::tr(i, o, experts, ranks.as_deref().ok_or_else(|| Error::config("tr layers need `ranks`"))?),
        }
        .with_bias(bias)
        .with_gating(gate_activation, gate_norm);
        if let Some(e) = norm_eps {
            cfg.norm_eps = e;
        }
        if let Some(m) = norm_momentum {
            cfg.norm_momentum = m;
        }
        cfg.validate()?;
        Ok(cfg)
    };

    let layer = make(kind, input_dim, output_dim, &experts, rank, &ranks)?;
    let block = match hidden_dim {
        Some(h) => {
            let bk = block_kind.unwrap_or(kind);
            let be = block_experts.unwrap_or_else(|| experts.clone());
            let br = block_rank.or(rank);
            let brs = block_ranks.or_else(|| ranks.clone());
            Some(BlockSpec {
                first: make(bk, input_dim, h, &be, br, &brs)?,
                second: make(bk, h, input_dim, &be, br, &brs)?,
                activation: block_activation.unwrap_or(Pointwise::Gelu),
            })
        }
        None => {
            if block_kind.is_some() || block_experts.is_some() || block_rank.is_some() || block_ranks.is_some() || block_activation.is_some() {
                return Err(Error::config("block_* keys need hidden_dim"));
            }
            None
        }
    };
    let optimizer = match optim {
        OptimKind::Adam => Optimizer {
            beta1: beta1.unwrap_or(0.9),
            beta2: beta2.unwrap_or(0.999),
            eps: adam_eps.unwrap_or(1e-8),
            ..Optimizer::adam(lr)
        },
        OptimKind::SgdMomentum => Optimizer::sgd(lr, momentum.unwrap_or(0.9)),
    };
    optimizer.validate()?;
    let init = InitConfig::new(seed).with_sigma(&sigma);
    Ok(ExperimentConfig { layer, block, init, dtype, train: TrainConfig { epochs, batch_size, seed }, optimizer, cp_rank: rank, tr_ranks: ranks })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

impl ExperimentConfig {
    /// The output layer rebuilt as `kind`, when the file gives the ranks that kind needs.
    pub fn layer_as(&self, kind: LayerKind) -> Option<LayerConfig> {
        let mut cfg = self.layer.clone();
        cfg.kind = kind;
        match kind {
            LayerKind::Dense => {}
            LayerKind::Cp => cfg.cp_rank = self.cp_rank?,
            LayerKind::Tr => cfg.tr_ranks = self.tr_ranks.clone()?,
        }
        cfg.validate().ok().map(|_| cfg)
    }

    /// Initial model: block parameters are drawn first, then the output layer,
    /// from one stream per component seeded by `seed` and `seed + 1`.
    pub fn build<T: Scalar>(&self) -> Result<Model<T>> {
        match &self.block {
            None => Ok(Model::head_only(init_layer(&self.layer, &self.init)?)),
            Some(b) => {
                let block = init_block(&b.first, &b.second, b.activation, &self.init)?;
                let head_init = InitConfig { seed: self.init.seed.wrapping_add(1), ..self.init.clone() };
                Model::with_block(block, init_layer(&self.layer, &head_init)?)
            }
        }
    }
}

/// Parses a synthetic dataset description.
///
/// Required: `classes`, `clusters_per_class`, `input_dim`, `seed`.
/// Optional: `spread` (1), `separation` (4), `samples_per_cluster` (50),
/// `cluster_samples` and `cluster_tags` (one entry per cluster),
/// `centers` (points separated by `;`, coordinates by `,`), `test_fraction` (0.2).
pub fn parse_synthetic_str(text: &str) -> Result<SyntheticSpec> {
    let mut kv = KeyValues::parse(text)?;
    let classes = kv.required("classes", positive)?;
    let clusters = kv.required("clusters_per_class", positive)?;
    let input_dim = kv.required("input_dim", positive)?;
    let seed = kv.required("seed", |s| s.parse().ok())?;
    let mut spec = SyntheticSpec::new(classes, clusters, input_dim, seed);
    if let Some(v) = kv.optional("spread", finite)? {
        spec.spread = v;
    }
    if let Some(v) = kv.optional("separation", finite)? {
        spec.separation = v;
    }
    if let Some(v) = kv.parsed("samples_per_cluster")? {
        spec.samples_per_cluster = v;
    }
    spec.cluster_samples = kv.optional("cluster_samples", count_list)?;
    spec.cluster_tags = kv.optional("cluster_tags", count_list)?;
    spec.centers = kv.optional("centers", |s| s.split(';').map(|p| float_list(p.trim())).collect())?;
    if let Some(v) = kv.optional("test_fraction", finite)? {
        spec.test_fraction = v;
    }
    kv.finish()?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_synthetic(path: &Path) -> Result<SyntheticSpec> {
    parse_synthetic_str(&std::fs::read_to_string(path)?)
}
