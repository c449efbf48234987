//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MUMO"  u32 version = 1  u8 dtype  u32 array_count
//! per array: u16 name_len  name (UTF-8)  u8 order  u64 extent × order  scalars
//! ```
//!
//! Every array uses the file's dtype. Layer configuration is stored in
//! small `*.config` arrays next to the parameters; optimizer state uses the
//! `optim.` prefix.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::activation::{GateActivation, Pointwise};
use crate::error::{Error, Result};
use crate::layer::{init_block, init_layer, InitConfig, LayerConfig, LayerKind, MoeBlock, MoeLayer};
use crate::model::Model;
use crate::norm::NormKind;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use crate::train::{OptimKind, Optimizer};

pub const MAGIC: &[u8; 4] = b"MUMO";
pub const VERSION: u32 = 1;

/// One named array; values are held in `f64`, which represents both dtypes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        Array { name: name.into(), shape: shape.to_vec(), data }
    }

    fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Array::new(name, &[n], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: Dtype,
    pub arrays: Vec<Array>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::format(format!(
                "length mismatch: needed {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(dtype: Dtype) -> Self {
        Checkpoint { dtype, arrays: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for a in &self.arrays {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::format(format!("duplicate array name {:?}", a.name)));
            }
            if a.name.len() > u16::MAX as usize || a.shape.len() > u8::MAX as usize {
                return Err(Error::format(format!("array {:?} has an over-long name or shape", a.name)));
            }
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::format(format!("array {:?} holds {} values for shape {:?}", a.name, a.data.len(), a.shape)));
            }
        }
        if self.arrays.len() > u32::MAX as usize {
            return Err(Error::format("too many arrays"));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype.code());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.shape.len() as u8);
            for &e in &a.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match self.dtype {
                Dtype::F32 => a.data.iter().for_each(|&v| f32::from_f64(v).write_le(&mut out)),
                Dtype::F64 => a.data.iter().for_each(|&v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4).map_err(|_| Error::format("bad magic: file too short"))? != MAGIC {
            return Err(Error::format("bad magic: not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let code = r.u8()?;
        let dtype = Dtype::from_code(code).ok_or_else(|| Error::format(format!("unknown dtype code {code}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("array name is not UTF-8"))?.to_string();
            let order = r.u8()? as usize;
            let shape = (0..order)
                .map(|_| r.u64().and_then(|e| usize::try_from(e).map_err(|_| Error::format("extent overflows usize"))))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::format(format!("array {name:?} is too large")))?;
            let raw = r.take(n)?;
            let data = match dtype {
                Dtype::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
                Dtype::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
            };
            arrays.push(Array { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(Error::format(format!("length mismatch: {} trailing bytes", bytes.len() - r.at)));
        }
        let ckpt = Checkpoint { dtype, arrays };
        ckpt.check()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&std::fs::read(path)?)
    }
}

fn config_array(prefix: &str, cfg: &LayerConfig) -> Array {
    let mut v = vec![
        cfg.kind.code() as f64,
        cfg.input_dim as f64,
        cfg.output_dim as f64,
        f64::from(u8::from(cfg.bias)),
        cfg.gate_activation.code() as f64,
        cfg.gate_norm.code() as f64,
        cfg.norm_eps,
        cfg.norm_momentum,
        cfg.cp_rank as f64,
        cfg.experts.len() as f64,
    ];
    v.extend(cfg.experts.iter().map(|&n| n as f64));
    v.push(cfg.tr_ranks.len() as f64);
    v.extend(cfg.tr_ranks.iter().map(|&r| r as f64));
    Array::vector(format!("{prefix}config"), v)
}

fn count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as usize)
    } else {
        Err(Error::format(format!("{what} value {v} is not a count")))
    }
}

fn code(v: f64, what: &str) -> Result<u8> {
    count(v, what).and_then(|c| u8::try_from(c).map_err(|_| Error::format(format!("{what} code {v} out of range"))))
}

fn parse_config(a: &Array) -> Result<LayerConfig> {
    let v = &a.data;
    let mut it = v.iter().copied();
    let mut next = |what: &str| it.next().ok_or_else(|| Error::format(format!("{} is truncated at {what}", a.name)));
    let kind = LayerKind::from_code(code(next("kind")?, "kind")?).ok_or_else(|| Error::format("unknown layer kind code"))?;
    let input_dim = count(next("input_dim")?, "input_dim")?;
    let output_dim = count(next("output_dim")?, "output_dim")?;
    let bias = next("bias")? != 0.0;
    let gate_activation =
        GateActivation::from_code(code(next("gate_activation")?, "activation")?).ok_or_else(|| Error::format("unknown activation code"))?;
    let gate_norm = NormKind::from_code(code(next("gate_norm")?, "norm")?).ok_or_else(|| Error::format("unknown norm code"))?;
    let norm_eps = next("norm_eps")?;
    let norm_momentum = next("norm_momentum")?;
    let cp_rank = count(next("cp_rank")?, "cp_rank")?;
    let levels = count(next("levels")?, "levels")?;
    let experts = (0..levels).map(|_| next("experts").and_then(|x| count(x, "experts"))).collect::<Result<Vec<_>>>()?;
    let ranks = count(next("ranks")?, "ranks")?;
    let tr_ranks = (0..ranks).map(|_| next("tr_ranks").and_then(|x| count(x, "tr_ranks"))).collect::<Result<Vec<_>>>()?;
    if it.next().is_some() {
        return Err(Error::format(format!("{} has trailing values", a.name)));
    }
    let cfg = LayerConfig {
        kind,
        input_dim,
        output_dim,
        experts,
        cp_rank,
        tr_ranks,
        bias,
        gate_activation,
        gate_norm,
        norm_eps,
        norm_momentum,
    };
    cfg.validate().map_err(|e| Error::format(format!("{}: {e}", a.name)))?;
    Ok(cfg)
}

fn ablation_array(name: String, ablated: &[(usize, usize)]) -> Array {
    let data = ablated.iter().flat_map(|&(e, n)| [e as f64, n as f64]).collect();
    Array::new(name, &[ablated.len(), 2], data)
}

fn parse_ablations(a: &Array) -> Result<Vec<(usize, usize)>> {
    if a.shape.len() != 2 || a.shape[1] != 2 {
        return Err(Error::format(format!("{} must have shape (k, 2)", a.name)));
    }
    a.data.chunks(2).map(|p| Ok((count(p[0], "level")?, count(p[1], "expert")?))).collect()
}

/// Serializes a model, and optionally optimizer state, with dtype `T`.
pub fn model_checkpoint<T: Scalar>(model: &Model<T>, optimizer: Option<&Optimizer>) -> Checkpoint {
    let mut ck = Checkpoint::new(T::DTYPE);
    let mut ablations = Vec::new();
    if let Some(b) = &model.block {
        ck.arrays.push(Array::vector("block.activation", vec![b.activation.code() as f64]));
        ck.arrays.push(config_array("block.first.", &b.first_config));
        ck.arrays.push(config_array("block.second.", &b.second_config));
        ablations.push(ablation_array("block.ablated".into(), b.ablated()));
    }
    ck.arrays.push(config_array("head.", &model.head.config));
    ablations.push(ablation_array("head.ablated".into(), model.head.ablated()));
    ck.arrays.extend(ablations);
    for (name, t) in model.params().into_iter().chain(model.buffers()) {
        ck.arrays.push(Array::new(name, t.shape(), t.data().iter().map(|v| v.to_f64()).collect()));
    }
    if let Some(o) = optimizer {
        let meta = vec![o.kind.code() as f64, o.lr, o.beta1, o.beta2, o.eps, o.step as f64, o.first.len() as f64, o.second.len() as f64];
        ck.arrays.push(Array::vector("optim.meta", meta));
        for (k, s) in o.first.iter().enumerate() {
            ck.arrays.push(Array::vector(format!("optim.first.{k}"), s.clone()));
        }
        for (k, s) in o.second.iter().enumerate() {
            ck.arrays.push(Array::vector(format!("optim.second.{k}"), s.clone()));
        }
    }
    ck
}

fn take<'a>(map: &mut HashMap<&'a str, &'a Array>, name: &str) -> Result<&'a Array> {
    map.remove(name).ok_or_else(|| Error::format(format!("checkpoint lacks array {name:?}")))
}

/// Rebuilds a model stored by [`model_checkpoint`]. Values are converted to
/// `T`; loading into the dtype the file was written with is exact.
pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint) -> Result<(Model<T>, Option<Optimizer>)> {
    let mut map: HashMap<&str, &Array> = ck.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    let init = InitConfig::new(0);
    let head_cfg = parse_config(take(&mut map, "head.config")?)?;
    let mut head: MoeLayer<T> = init_layer(&head_cfg, &init)?;
    for (e, n) in parse_ablations(take(&mut map, "head.ablated")?)? {
        head = head.ablate(e, n).map_err(|e| Error::format(format!("head.ablated: {e}")))?;
    }
    let mut model = if map.contains_key("block.activation") {
        let act = take(&mut map, "block.activation")?;
        let activation = act
            .data
            .first()
            .and_then(|&c| code(c, "activation").ok())
            .and_then(Pointwise::from_code)
            .ok_or_else(|| Error::format("unknown block activation code"))?;
        let first = parse_config(take(&mut map, "block.first.config")?)?;
        let second = parse_config(take(&mut map, "block.second.config")?)?;
        let mut block: MoeBlock<T> = init_block(&first, &second, activation, &init)?;
        for (e, n) in parse_ablations(take(&mut map, "block.ablated")?)? {
            block = block.ablate(e, n).map_err(|e| Error::format(format!("block.ablated: {e}")))?;
        }
        Model::with_block(block, head).map_err(|e| Error::format(e.to_string()))?
    } else {
        Model::head_only(head)
    };
    let names: Vec<String> = model.params().into_iter().chain(model.buffers()).map(|(n, _)| n).collect();
    let arrays = names.iter().map(|n| take(&mut map, n)).collect::<Result<Vec<_>>>()?;
    let n_params = model.params().len();
    for (t, a) in model.params_mut().into_iter().zip(&arrays[..n_params]) {
        fill(t, a)?;
    }
    for (t, a) in model.buffers_mut().into_iter().zip(&arrays[n_params..]) {
        fill(t, a)?;
    }
    let optimizer = if map.contains_key("optim.meta") { Some(read_optimizer(&mut map)?) } else { None };
    if let Some(extra) = map.keys().min() {
        return Err(Error::format(format!("unexpected array {extra:?}")));
    }
    Ok((model, optimizer))
}

fn fill<T: Scalar>(dst: &mut Tensor<T>, a: &Array) -> Result<()> {
    if a.shape != dst.shape() {
        return Err(Error::format(format!("array {:?} has shape {:?}, the model needs {:?}", a.name, a.shape, dst.shape())));
    }
    for (d, &v) in dst.data_mut().iter_mut().zip(&a.data) {
        *d = T::from_f64(v);
    }
    Ok(())
}

fn read_optimizer<'a>(map: &mut HashMap<&'a str, &'a Array>) -> Result<Optimizer> {
    let meta = &take(map, "optim.meta")?.data;
    if meta.len() != 8 {
        return Err(Error::format("optim.meta must hold 8 values"));
    }
    let kind = OptimKind::from_code(code(meta[0], "optimizer")?).ok_or_else(|| Error::format("unknown optimizer code"))?;
    let (n1, n2) = (count(meta[6], "slots")?, count(meta[7], "slots")?);
    let first = (0..n1).map(|k| take(map, &format!("optim.first.{k}")).map(|a| a.data.clone())).collect::<Result<Vec<_>>>()?;
    let second = (0..n2).map(|k| take(map, &format!("optim.second.{k}")).map(|a| a.data.clone())).collect::<Result<Vec<_>>>()?;
    Ok(Optimizer { kind, lr: meta[1], beta1: meta[2], beta2: meta[3], eps: meta[4], step: count(meta[5], "step")? as u64, first, second })
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, optimizer: Option<&Optimizer>, path: &Path) -> Result<()> {
    model_checkpoint(model, optimizer).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, Option<Optimizer>)> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}
