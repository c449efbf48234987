use super::{
    check_ablation, check_input, experts_backward, experts_forward, map_experts, mask_gradients, validate_weights, weight_names,
    Coefficients, ExpertCache, GateCache, Gating, Gradients, LayerConfig, LayerKind, MoeLayer, Weights,
};
use crate::activation::Pointwise;
use crate::error::{Error, Result};
use crate::norm::{Mode, RunningUpdate};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two expert layers with a pointwise nonlinearity in between, sharing one
/// set of coefficients computed from the block input:
/// `y = W₂ ×₁ a ×₂ σ(W₁ ×₁ a ×₂ z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeBlock<T = f64> {
    pub first_config: LayerConfig,
    pub second_config: LayerConfig,
    pub gating: Gating<T>,
    pub first: Weights<T>,
    pub second: Weights<T>,
    pub activation: Pointwise,
    ablated: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Tensor<f64>,
    gate: GateCache,
    first: ExpertCache,
    hidden: Tensor<f64>,
    activated: Tensor<f64>,
    second: ExpertCache,
}

impl BlockCache {
    pub fn coefficients(&self) -> &Coefficients {
        self.gate.coefficients()
    }
}

pub struct BlockOutput {
    pub output: Tensor<f64>,
    pub cache: BlockCache,
    pub updates: Vec<Option<RunningUpdate>>,
}

fn check_pair(first: &LayerConfig, second: &LayerConfig) -> Result<()> {
    if first.output_dim != second.input_dim {
        return Err(Error::shape(format!(
            "first layer outputs {} features but the second expects {}",
            first.output_dim, second.input_dim
        )));
    }
    if first.experts != second.experts {
        return Err(Error::shape(format!(
            "block layers need equal expert counts, got {:?} and {:?}",
            first.experts, second.experts
        )));
    }
    Ok(())
}

/// Block output using `layer1`'s gating for both layers; `layer2`'s own
/// gating parameters are ignored.
pub fn block_forward<T: Scalar>(layer1: &MoeLayer<T>, layer2: &MoeLayer<T>, z: &Tensor<f64>, activation: Pointwise) -> Result<Tensor<f64>> {
    check_pair(&layer1.config, &layer2.config)?;
    let coeffs = layer1.coefficients(z, Mode::Eval)?;
    let hidden = layer1.forward_with_coefficients(&coeffs, z)?.map(|x| activation.apply(x));
    layer2.forward_with_coefficients(&coeffs, &hidden)
}

impl<T: Scalar> MoeBlock<T> {
    pub fn from_parts(
        first_config: LayerConfig,
        second_config: LayerConfig,
        gating: Gating<T>,
        first: Weights<T>,
        second: Weights<T>,
        activation: Pointwise,
    ) -> Result<Self> {
        first_config.validate()?;
        second_config.validate()?;
        check_pair(&first_config, &second_config)?;
        validate_weights(&first_config, &first)?;
        validate_weights(&second_config, &second)?;
        if gating.input_dim() != first_config.input_dim || gating.experts() != first_config.experts {
            return Err(Error::shape("gating shape does not match the first layer"));
        }
        Ok(MoeBlock { first_config, second_config, gating, first, second, activation, ablated: Vec::new() })
    }

    /// Joins two layers into a block, keeping the first layer's gating.
    pub fn from_layers(first: MoeLayer<T>, second: MoeLayer<T>, activation: Pointwise) -> Result<Self> {
        Self::from_parts(first.config, second.config, first.gating, first.weights, second.weights, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.first_config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.second_config.output_dim
    }

    pub fn experts(&self) -> &[usize] {
        &self.first_config.experts
    }

    pub fn ablated(&self) -> &[(usize, usize)] {
        &self.ablated
    }

    pub fn ablate(&self, level: usize, expert: usize) -> Result<Self> {
        check_ablation(&self.first_config.experts, level, expert)?;
        let mut out = self.clone();
        if !out.ablated.contains(&(level, expert)) {
            out.ablated.push((level, expert));
        }
        Ok(out)
    }

    pub fn clear_ablations(&mut self) {
        self.ablated.clear();
    }

    pub fn coefficients(&self, z: &Tensor<f64>, mode: Mode) -> Result<Coefficients> {
        Ok(self.gating.forward(z, mode)?.0)
    }

    pub fn forward(&self, z: &Tensor<f64>, mode: Mode) -> Result<BlockOutput> {
        check_input(z, self.input_dim())?;
        let (coeffs, gate, updates) = self.gating.forward(z, mode)?;
        let masked = coeffs.masked(&self.ablated);
        let (hidden, first) = experts_forward(&self.first_config, &self.first, &masked, z, true)?;
        let activated = hidden.map(|x| self.activation.apply(x));
        let (output, second) = experts_forward(&self.second_config, &self.second, &masked, &activated, true)?;
        let cache = BlockCache {
            input: z.clone(),
            gate,
            first: first.expect("cache requested"),
            hidden,
            activated,
            second: second.expect("cache requested"),
        };
        Ok(BlockOutput { output, cache, updates })
    }

    pub fn forward_train(&mut self, z: &Tensor<f64>) -> Result<(Tensor<f64>, BlockCache)> {
        let out = self.forward(z, Mode::Training)?;
        self.gating.apply_updates(&out.updates);
        Ok((out.output, out.cache))
    }

    pub fn predict(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let coeffs = self.coefficients(z, Mode::Eval)?;
        self.forward_with_coefficients(&coeffs, z)
    }

    pub fn forward_with_coefficients(&self, coeffs: &Coefficients, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let masked = coeffs.masked(&self.ablated);
        let hidden = experts_forward(&self.first_config, &self.first, &masked, z, false)?.0;
        let activated = hidden.map(|x| self.activation.apply(x));
        Ok(experts_forward(&self.second_config, &self.second, &masked, &activated, false)?.0)
    }

    pub fn backward(&self, cache: &BlockCache, upstream: &Tensor<f64>) -> Result<Gradients> {
        let g2 = experts_backward(&self.second_config, &self.second, &cache.second, &cache.activated, upstream)?;
        let dh: Vec<f64> = g2
            .input
            .iter()
            .zip(cache.hidden.data())
            .map(|(d, &h)| d * self.activation.derivative(h))
            .collect();
        let dh = Tensor::matrix(cache.hidden.rows(), cache.hidden.cols(), dh)?;
        let g1 = experts_backward(&self.first_config, &self.first, &cache.first, &cache.input, &dh)?;
        let mut dcoeffs: Vec<Vec<f64>> = g1
            .coeffs
            .iter()
            .zip(&g2.coeffs)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        mask_gradients(&mut dcoeffs, &self.first_config.experts, &self.ablated);
        let (mut grads, dz_gate) = self.gating.backward(&cache.input, &cache.gate, &dcoeffs)?;
        grads.extend(g1.weights);
        grads.extend(g2.weights);
        let shapes: Vec<Vec<usize>> = self.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let params = grads
            .into_iter()
            .zip(&shapes)
            .map(|(g, s)| Tensor::from_vec(s, g))
            .collect::<Result<Vec<_>>>()?;
        let dz: Vec<f64> = g1.input.iter().zip(&dz_gate).map(|(a, b)| a + b).collect();
        Ok(Gradients { params, input: Tensor::matrix(cache.input.rows(), cache.input.cols(), dz)? })
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.gating.params();
        let w1 = self.first.tensors();
        let names1 = weight_names(self.first_config.kind, w1.len());
        out.extend(names1.into_iter().map(|n| format!("first.{n}")).zip(w1));
        let w2 = self.second.tensors();
        let names2 = weight_names(self.second_config.kind, w2.len());
        out.extend(names2.into_iter().map(|n| format!("second.{n}")).zip(w2));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.gating.params_mut();
        out.extend(self.first.tensors_mut());
        out.extend(self.second.tensors_mut());
        out
    }

    pub fn stored_param_count(&self) -> u64 {
        self.params().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Copy of the block with every expert matrix of both layers replaced by
    /// `f(W_n)`, stored densely.
    pub fn map_experts(&self, f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>) -> Result<MoeBlock<T>> {
        let first = map_experts(&self.first_config, &self.first, &f)?;
        let second = map_experts(&self.second_config, &self.second, &f)?;
        let mut out = self.clone();
        out.first_config.kind = LayerKind::Dense;
        out.second_config.kind = LayerKind::Dense;
        out.first = first;
        out.second = second;
        Ok(out)
    }
}
