use crate::activation::GateActivation;
use crate::error::{Error, Result};
use crate::norm::{NormKind, DEFAULT_EPS, DEFAULT_MOMENTUM};

/// Storage form of the expert weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Cp,
    Tr,
}

impl LayerKind {
    pub const ALL: [LayerKind; 3] = [LayerKind::Dense, LayerKind::Cp, LayerKind::Tr];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Cp => "cp",
            LayerKind::Tr => "tr",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::Cp => 1,
            LayerKind::Tr => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerKind::Dense),
            1 => Some(LayerKind::Cp),
            2 => Some(LayerKind::Tr),
            _ => None,
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(LayerKind::Dense),
            "cp" => Ok(LayerKind::Cp),
            "tr" => Ok(LayerKind::Tr),
            other => Err(Error::config(format!("unknown layer kind {other:?}"))),
        }
    }
}

/// Shape and gating configuration of one layer.
///
/// The expert weight tensor has modes `N_1 × … × N_E × I' × O`, where
/// `I' = I + 1` when the bias is folded into the input mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub experts: Vec<usize>,
    /// Shared CP rank (CP kind only).
    pub cp_rank: usize,
    /// Ring ranks `R_1..R_{E+2}` (TR kind only); core `k` has shape `(R_k, d_k, R_{k+1})`.
    pub tr_ranks: Vec<usize>,
    pub bias: bool,
    pub gate_activation: GateActivation,
    pub gate_norm: NormKind,
    pub norm_eps: f64,
    pub norm_momentum: f64,
}

impl LayerConfig {
    fn base(kind: LayerKind, input_dim: usize, output_dim: usize, experts: &[usize]) -> Self {
        LayerConfig {
            kind,
            input_dim,
            output_dim,
            experts: experts.to_vec(),
            cp_rank: 0,
            tr_ranks: Vec::new(),
            bias: true,
            gate_activation: GateActivation::Entmax15,
            gate_norm: NormKind::None,
            norm_eps: DEFAULT_EPS,
            norm_momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn dense(input_dim: usize, output_dim: usize, experts: &[usize]) -> Self {
        Self::base(LayerKind::Dense, input_dim, output_dim, experts)
    }

    pub fn cp(input_dim: usize, output_dim: usize, experts: &[usize], rank: usize) -> Self {
        LayerConfig { cp_rank: rank, ..Self::base(LayerKind::Cp, input_dim, output_dim, experts) }
    }

    pub fn tr(input_dim: usize, output_dim: usize, experts: &[usize], ranks: &[usize]) -> Self {
        LayerConfig { tr_ranks: ranks.to_vec(), ..Self::base(LayerKind::Tr, input_dim, output_dim, experts) }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_gating(mut self, activation: GateActivation, norm: NormKind) -> Self {
        self.gate_activation = activation;
        self.gate_norm = norm;
        self
    }

    /// Hierarchy depth `E`.
    pub fn levels(&self) -> usize {
        self.experts.len()
    }

    /// Input-mode extent after the bias fold.
    pub fn folded_input(&self) -> usize {
        self.input_dim + usize::from(self.bias)
    }

    /// Total number of experts `∏ N_e`.
    pub fn expert_count(&self) -> usize {
        self.experts.iter().product()
    }

    /// Extents of the contracted modes: `[N_1, …, N_E, I']`.
    pub fn input_modes(&self) -> Vec<usize> {
        let mut d = self.experts.clone();
        d.push(self.folded_input());
        d
    }

    /// Shape of the full weight tensor `[N_1, …, N_E, I', O]`.
    pub fn tensor_shape(&self) -> Vec<usize> {
        let mut d = self.input_modes();
        d.push(self.output_dim);
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("input_dim and output_dim must be at least 1"));
        }
        if self.experts.is_empty() || self.experts.contains(&0) {
            return Err(Error::config(format!("expert counts must be a non-empty list of positive integers, got {:?}", self.experts)));
        }
        match self.kind {
            LayerKind::Dense => {}
            LayerKind::Cp => {
                if self.cp_rank == 0 {
                    return Err(Error::config("cp rank must be at least 1"));
                }
            }
            LayerKind::Tr => {
                let want = self.levels() + 2;
                if self.tr_ranks.len() != want {
                    return Err(Error::config(format!(
                        "tr ranks must list {want} values for {} expert level(s), got {}",
                        self.levels(),
                        self.tr_ranks.len()
                    )));
                }
                if self.tr_ranks.contains(&0) {
                    return Err(Error::config("tr ranks must be at least 1"));
                }
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps must be positive"));
        }
        if !(self.norm_momentum > 0.0 && self.norm_momentum < 1.0) {
            return Err(Error::config("norm_momentum must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_validation() {
        let c = LayerConfig::cp(768, 1000, &[128], 512);
        assert_eq!(c.folded_input(), 769);
        assert_eq!(c.tensor_shape(), vec![128, 769, 1000]);
        assert!(c.validate().is_ok());
        assert!(LayerConfig::tr(4, 4, &[2, 2], &[1, 2, 3]).validate().is_err());
        assert!(LayerConfig::tr(4, 4, &[2, 2], &[1, 2, 3, 4]).validate().is_ok());
        assert!(LayerConfig::cp(4, 4, &[2], 0).validate().is_err());
        assert!(LayerConfig::dense(4, 4, &[]).validate().is_err());
    }
}
