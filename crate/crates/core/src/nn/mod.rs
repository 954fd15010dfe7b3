//! Quantized building blocks and the three desk-scale architectures.
//!
//! A quantized block runs `BN -> ternarize -> two binary convs -> sum ->
//! activation`. The first and the last layer of every model stay in full
//! precision.

mod layers;
mod model;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::GradMode;
use crate::tensor::{Float, Tensor};

pub use layers::{
    build_block, Activation, BatchNorm, BlockWeights, FloatConv, Linear, QuantConvBlock,
    ResidualUnit,
};
pub use model::{BlockProbe, ForwardPass, Layer, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// LeNet-style net for 1×28×28 inputs.
    LenetT,
    /// VGG-7 topology for 3×32×32 inputs, width scaled.
    Vgg7T,
    /// Three-stage residual net for 3×32×32 inputs.
    ResminiT,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::LenetT => "lenet_t",
            Architecture::Vgg7T => "vgg7_t",
            Architecture::ResminiT => "resmini_t",
        }
    }

    /// `[channels, height, width]` of one input image.
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            Architecture::LenetT => [1, 28, 28],
            Architecture::Vgg7T | Architecture::ResminiT => [3, 32, 32],
        }
    }

    pub fn default_width(self) -> f64 {
        match self {
            Architecture::Vgg7T => 0.25,
            Architecture::LenetT | Architecture::ResminiT => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantMode {
    #[serde(rename = "float")]
    Float,
    /// Ternary weights and ternary activations.
    #[serde(rename = "sttn_2_2")]
    Sttn22,
    /// Ternary weights, full-precision activations.
    #[serde(rename = "sttn_2_32")]
    Sttn232,
    /// Hard-threshold ternary weights from a single latent kernel, ternary
    /// activations.
    #[serde(rename = "twn_baseline")]
    TwnBaseline,
}

impl QuantMode {
    pub fn id(self) -> &'static str {
        match self {
            QuantMode::Float => "float",
            QuantMode::Sttn22 => "sttn_2_2",
            QuantMode::Sttn232 => "sttn_2_32",
            QuantMode::TwnBaseline => "twn_baseline",
        }
    }

    pub fn ternary_activations(self) -> bool {
        matches!(self, QuantMode::Sttn22 | QuantMode::TwnBaseline)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub mode: QuantMode,
    /// Channel multiplier applied to every hidden layer.
    pub width: f64,
    pub classes: usize,
    #[serde(default)]
    pub grad_mode: GradMode,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, mode: QuantMode) -> Self {
        ModelConfig {
            architecture,
            mode,
            width: architecture.default_width(),
            classes: 10,
            grad_mode: GradMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::invalid("model_config", format!("width {} must be positive", self.width)));
        }
        if self.classes < 2 {
            return Err(Error::invalid("model_config", "need at least 2 classes"));
        }
        Ok(())
    }

    /// Hidden channel count after applying the width multiplier.
    pub(crate) fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(1)
    }
}

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Full-precision conv or linear weight.
    Weight,
    /// Latent float kernel behind a quantized view.
    Latent,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Weight decay applies to conv/linear weights, latent or not.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Latent)
    }
}

/// Zero-mean normal with std `sqrt(2 / fan_in)`.
pub(crate) fn he_init<F: Float, R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<F> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| F::from_f64(normal.sample(rng)))
}
