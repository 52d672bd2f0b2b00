//! Mask strategy grid: granularity × value model × gradient rule, plus a
//! fine-tune-everything reference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{
    self, compose_node, harden_node, keep_probability_node, relax_sigmoid_node, BinaryMask,
    MaskHyperparams, SoftMask, StraightThrough,
};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    ElementWise,
    KernelWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskValue {
    Binary,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientRuleKind {
    Ste,
    SoftmaxTrick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum StrategySpec {
    Mask {
        granularity: Granularity,
        value: MaskValue,
        rule: GradientRuleKind,
    },
    Finetune,
}

impl StrategySpec {
    pub const fn mask(granularity: Granularity, value: MaskValue, rule: GradientRuleKind) -> Self {
        StrategySpec::Mask {
            granularity,
            value,
            rule,
        }
    }

    /// Kernel-wise soft mask trained with the softmax trick.
    pub const KSM: Self = Self::mask(Granularity::KernelWise, MaskValue::Soft, GradientRuleKind::SoftmaxTrick);
    pub const PIGGYBACK: Self = Self::mask(Granularity::ElementWise, MaskValue::Binary, GradientRuleKind::Ste);
    pub const PIGGYBACK_KERNEL: Self = Self::mask(Granularity::KernelWise, MaskValue::Binary, GradientRuleKind::Ste);
    pub const PIGGYBACK_SOFT: Self = Self::mask(Granularity::ElementWise, MaskValue::Soft, GradientRuleKind::Ste);
    pub const SOFTMAX_BINARY: Self =
        Self::mask(Granularity::KernelWise, MaskValue::Binary, GradientRuleKind::SoftmaxTrick);
    pub const ELEMENT_SOFT: Self =
        Self::mask(Granularity::ElementWise, MaskValue::Soft, GradientRuleKind::SoftmaxTrick);

    /// The ablation rows followed by the fine-tune reference.
    pub const ALL: [StrategySpec; 7] = [
        Self::PIGGYBACK,
        Self::PIGGYBACK_KERNEL,
        Self::PIGGYBACK_SOFT,
        Self::SOFTMAX_BINARY,
        Self::ELEMENT_SOFT,
        Self::KSM,
        StrategySpec::Finetune,
    ];

    /// Ablation-table row name, if the combination is one of the rows.
    pub fn row_name(&self) -> Option<&'static str> {
        Some(match *self {
            Self::PIGGYBACK => "Piggyback",
            Self::PIGGYBACK_KERNEL => "Piggyback - Ker-wise",
            Self::PIGGYBACK_SOFT => "Piggyback - Soft",
            Self::SOFTMAX_BINARY => "Ours - Softmax",
            Self::ELEMENT_SOFT => "Ours - Ele-wise",
            Self::KSM => "Ours - Full",
            StrategySpec::Finetune => "Finetune",
            _ => return None,
        })
    }

    /// Short command-line name.
    pub fn cli_name(&self) -> Option<&'static str> {
        Some(match *self {
            Self::KSM => "ksm",
            Self::PIGGYBACK => "piggyback",
            Self::PIGGYBACK_KERNEL => "piggyback-ker",
            Self::PIGGYBACK_SOFT => "piggyback-soft",
            Self::SOFTMAX_BINARY => "ksm-softmax",
            Self::ELEMENT_SOFT => "ksm-ele",
            StrategySpec::Finetune => "finetune",
            _ => return None,
        })
    }

    pub fn is_finetune(&self) -> bool {
        matches!(self, StrategySpec::Finetune)
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.cli_name(), self) {
            (Some(name), _) => f.write_str(name),
            (None, StrategySpec::Mask { granularity, value, rule }) => {
                write!(f, "{granularity:?}/{value:?}/{rule:?}")
            }
            (None, StrategySpec::Finetune) => f.write_str("finetune"),
        }
    }
}

impl FromStr for StrategySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategySpec::ALL
            .into_iter()
            .find(|spec| spec.cli_name() == Some(s))
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

/// STE threshold: `1` where `M^r ≥ τ`.
pub fn ste_binarize<F: Real>(real: &Tensor<F>, tau: f64) -> BinaryMask {
    let tau = F::from_f64_lossy(tau);
    BinaryMask::new(
        real.shape().to_vec(),
        real.data().iter().map(|&m| m >= tau).collect(),
    )
    .expect("same shape")
}

/// Records the STE binarization: hard threshold forward, identity backward.
pub fn ste_binarize_node<F: Real>(g: &mut Graph<F>, real: Var, tau: f64) -> Var {
    let bits = ste_binarize(g.value(real), tau).to_tensor();
    g.custom(&[real], bits, StraightThrough)
}

/// Forward/backward mask chain for one combination of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPipeline {
    pub granularity: Granularity,
    pub value: MaskValue,
    pub rule: GradientRuleKind,
    pub hp: MaskHyperparams,
}

impl MaskPipeline {
    /// Real-mask shape for a `(c_out, c_in, kh, kw)` weight.
    pub fn mask_shape(&self, weight_shape: &[usize]) -> Vec<usize> {
        match self.granularity {
            Granularity::KernelWise => weight_shape[..2].to_vec(),
            Granularity::ElementWise => weight_shape.to_vec(),
        }
    }

    pub fn init_real<F: Real>(&self, weight_shape: &[usize]) -> Tensor<F> {
        Tensor::full(self.mask_shape(weight_shape), F::from_f64_lossy(self.hp.init_value))
    }

    fn binary_node<F: Real>(
        &self,
        g: &mut Graph<F>,
        real: Var,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Var {
        match self.rule {
            GradientRuleKind::Ste => ste_binarize_node(g, real, self.hp.tau),
            GradientRuleKind::SoftmaxTrick => {
                let sigma = relax_sigmoid_node(g, real, &self.hp);
                let q = keep_probability_node(g, sigma, &self.hp, rng);
                harden_node(g, q)
            }
        }
    }

    /// Live mask values on the tape, differentiable in `real`.
    pub fn build<F: Real>(
        &self,
        g: &mut Graph<F>,
        real: Var,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        let binary = self.binary_node(g, real, rng);
        match self.value {
            MaskValue::Binary => Ok(binary),
            MaskValue::Soft => compose_node(g, real, binary),
        }
    }

    /// The mask a trained `real` produces at test time (no noise).
    pub fn freeze<F: Real>(&self, real: &Tensor<F>) -> Result<SoftMask<F>> {
        let binary = match self.rule {
            GradientRuleKind::Ste => ste_binarize(real, self.hp.tau),
            GradientRuleKind::SoftmaxTrick => {
                let q = mask::keep_probability(&mask::relax_sigmoid(real, &self.hp), self.hp.temperature);
                mask::harden(&q)
            }
        };
        let scaling = match self.value {
            MaskValue::Binary => mask::ScalingTensor::zeros(binary.shape().to_vec()),
            MaskValue::Soft => mask::scaling_tensor(real, &binary)?,
        };
        mask::compose_soft_mask(&binary, &scaling)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Mask(MaskPipeline),
    /// Trains a clone of the backbone directly; the frozen original is
    /// never touched.
    Finetune,
}

impl Strategy {
    pub fn pipeline(&self) -> Option<&MaskPipeline> {
        match self {
            Strategy::Mask(p) => Some(p),
            Strategy::Finetune => None,
        }
    }
}

/// Builds the mask chain for a grid combination. Only the ablation-table
/// combinations and fine-tuning are accepted.
pub fn make_strategy(spec: StrategySpec, hp: MaskHyperparams) -> Result<Strategy> {
    hp.validate()?;
    if spec.row_name().is_none() {
        return Err(Error::UnknownStrategy(spec.to_string()));
    }
    Ok(match spec {
        StrategySpec::Mask {
            granularity,
            value,
            rule,
        } => Strategy::Mask(MaskPipeline {
            granularity,
            value,
            rule,
            hp,
        }),
        StrategySpec::Finetune => Strategy::Finetune,
    })
}
