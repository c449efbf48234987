//! A classifier made of an optional μMoE block followed by an output layer.

use crate::error::{Error, Result};
use crate::gradcheck::GradTarget;
use crate::layer::{BlockCache, Coefficients, Gradients, LayerCache, MoeBlock, MoeLayer};
use crate::norm::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f64> {
    pub block: Option<MoeBlock<T>>,
    pub head: MoeLayer<T>,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    block: Option<BlockCache>,
    head: LayerCache,
}

impl<T: Scalar> Model<T> {
    pub fn head_only(head: MoeLayer<T>) -> Self {
        Model { block: None, head }
    }

    pub fn with_block(block: MoeBlock<T>, head: MoeLayer<T>) -> Result<Self> {
        if block.output_dim() != head.config.input_dim {
            return Err(Error::shape(format!(
                "block outputs {} features but the head expects {}",
                block.output_dim(),
                head.config.input_dim
            )));
        }
        Ok(Model { block: Some(block), head })
    }

    pub fn input_dim(&self) -> usize {
        match &self.block {
            Some(b) => b.input_dim(),
            None => self.head.config.input_dim,
        }
    }

    pub fn classes(&self) -> usize {
        self.head.config.output_dim
    }

    /// Expert counts of the routing layer: the block when present, else the head.
    pub fn experts(&self) -> &[usize] {
        match &self.block {
            Some(b) => b.experts(),
            None => &self.head.config.experts,
        }
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        match &self.block {
            Some(b) => self.head.predict(&b.predict(x)?),
            None => self.head.predict(x),
        }
    }

    /// Eval-mode coefficients of the routing layer.
    pub fn routing(&self, x: &Tensor<f64>) -> Result<Coefficients> {
        match &self.block {
            Some(b) => b.coefficients(x, Mode::Eval),
            None => self.head.coefficients(x, Mode::Eval),
        }
    }

    /// Pure forward pass in `mode`; running statistics are not touched.
    pub fn forward(&self, x: &Tensor<f64>, mode: Mode) -> Result<(Tensor<f64>, ModelCache)> {
        let (hidden, block) = match &self.block {
            Some(b) => {
                let out = b.forward(x, mode)?;
                (Some(out.output), Some(out.cache))
            }
            None => (None, None),
        };
        let out = self.head.forward(hidden.as_ref().unwrap_or(x), mode)?;
        Ok((out.output, ModelCache { block, head: out.cache }))
    }

    /// Training-mode forward pass that applies running-statistic updates.
    pub fn forward_train(&mut self, x: &Tensor<f64>) -> Result<(Tensor<f64>, ModelCache)> {
        let (hidden, block) = match &mut self.block {
            Some(b) => {
                let (h, c) = b.forward_train(x)?;
                (Some(h), Some(c))
            }
            None => (None, None),
        };
        let (logits, head) = self.head.forward_train(hidden.as_ref().unwrap_or(x))?;
        Ok((logits, ModelCache { block, head }))
    }

    /// Gradients of all parameters in [`Model::params`] order, plus the input.
    pub fn backward(&self, cache: &ModelCache, upstream: &Tensor<f64>) -> Result<Gradients> {
        let head = self.head.backward(&cache.head, upstream)?;
        match (&self.block, &cache.block) {
            (Some(b), Some(c)) => {
                let mut g = b.backward(c, &head.input)?;
                g.params.extend(head.params);
                Ok(g)
            }
            (None, None) => Ok(head),
            _ => Err(Error::usage("model cache does not match the model structure")),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(b) = &self.block {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("block.{n}"), t)));
        }
        out.extend(self.head.params().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.block {
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(b) = &self.block {
            out.extend(b.gating.buffers().into_iter().map(|(n, t)| (format!("block.{n}"), t)));
        }
        out.extend(self.head.gating.buffers().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.block {
            out.extend(b.gating.buffers_mut());
        }
        out.extend(self.head.gating.buffers_mut());
        out
    }

    pub fn param_count(&self) -> u64 {
        self.params().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Copy with expert `expert` of level `level` (0-based) switched off in
    /// the routing layer.
    pub fn ablate(&self, level: usize, expert: usize) -> Result<Self> {
        let mut out = self.clone();
        match &self.block {
            Some(b) => out.block = Some(b.ablate(level, expert)?),
            None => out.head = self.head.ablate(level, expert)?,
        }
        Ok(out)
    }

    /// Copy with every expert matrix of the block and head replaced by `f(W_n)`.
    pub fn map_experts(&self, f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>) -> Result<Self> {
        let block = match &self.block {
            Some(b) => Some(b.map_experts(&f)?),
            None => None,
        };
        Ok(Model { block, head: self.head.map_experts(&f)? })
    }
}

impl GradTarget for Model<f64> {
    fn output(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.forward(z, Mode::Training)?.0)
    }

    fn gradients(&self, z: &Tensor<f64>, upstream: &Tensor<f64>) -> Result<Gradients> {
        let (_, cache) = self.forward(z, Mode::Training)?;
        self.backward(&cache, upstream)
    }

    fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    fn param_mut(&mut self, k: usize) -> &mut Tensor<f64> {
        self.params_mut().swap_remove(k)
    }
}
