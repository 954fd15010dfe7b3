use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fuse::{fuse, fuse_twn};
use super::packed::{ternary_conv2d_trits, ternary_weight_conv2d, PackedKernel};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::{
    Activation, Architecture, BlockWeights, Layer, Model, ModelConfig, QuantConvBlock, QuantMode,
};
use crate::quant::ternarize_activation;
use crate::tensor::Tensor;
use crate::train::Normalization;

/// Per-layer tolerance of the export-time equivalence check, relative to
/// `max(1, |reference|)`.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

/// Inference-time BN statistics and affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// `BN -> ternarize (or pass-through) -> packed conv -> optional ReLU`.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryConvLayer {
    pub name: String,
    pub bn: BnParams,
    /// Ternarize the normalized input; otherwise it stays full precision.
    pub ternary_input: bool,
    pub kernel: PackedKernel,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

impl TernaryConvLayer {
    fn from_block(name: &str, block: &QuantConvBlock<f32>) -> Result<Self> {
        let kernel = match &block.weights {
            BlockWeights::Sttn(pair) => fuse(pair)?,
            BlockWeights::Twn(w) => fuse_twn(w)?,
            BlockWeights::Float(_) => {
                return Err(Error::invalid("fuse", format!("{name} is a full-precision block")))
            }
        };
        Ok(TernaryConvLayer {
            name: name.to_string(),
            bn: BnParams {
                gamma: block.bn.gamma.data().to_vec(),
                beta: block.bn.beta.data().to_vec(),
                mean: block.bn.running_mean.clone(),
                var: block.bn.running_var.clone(),
            },
            ternary_input: block.mode.ternary_activations(),
            kernel: PackedKernel::new(&kernel)?,
            stride: block.stride,
            pad: block.pad,
            relu: block.post_activation == Activation::Relu,
        })
    }

    /// Forward an NCHW batch.
    pub fn forward(&self, x: &Tensor<f32>, parallel: bool) -> Result<Tensor<f32>> {
        let (n, c, h, w) = x.dims4("ternary_conv_layer")?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(Tensor::new(vec![self.bn.gamma.len()], self.bn.gamma.clone())?);
        let beta = g.constant(Tensor::new(vec![self.bn.beta.len()], self.bn.beta.clone())?);
        let normed = g.batch_norm_eval(xv, gamma, beta, &self.bn.mean, &self.bn.var)?;
        let normed = g.value(normed);
        let image = c * h * w;
        let run = |i: usize| -> Result<Tensor<f32>> {
            let px = &normed.data()[i * image..][..image];
            if self.ternary_input {
                let px = Tensor::new(vec![image], px.to_vec())?;
                let trits = ternarize_activation(&px)?.trits();
                let acc = ternary_conv2d_trits(&trits, [c, h, w], &self.kernel, self.stride, self.pad)?;
                Ok(acc.scaled(self.kernel.scale))
            } else {
                ternary_weight_conv2d(px, [c, h, w], &self.kernel, self.stride, self.pad)
            }
        };
        let outs: Vec<Tensor<f32>> = if parallel {
            (0..n).into_par_iter().map(run).collect::<Result<_>>()?
        } else {
            (0..n).map(run).collect::<Result<_>>()?
        };
        let out_shape = outs[0].shape().to_vec();
        let mut data = Vec::with_capacity(n * outs[0].len());
        for o in outs {
            data.extend(o.into_data());
        }
        if self.relu {
            data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let mut shape = vec![n];
        shape.extend(out_shape);
        Tensor::new(shape, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusedLayer {
    FloatConv {
        weight: Tensor<f32>,
        stride: usize,
        pad: usize,
    },
    TernaryConv(TernaryConvLayer),
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    GlobalAvgPool,
    Linear {
        weight: Tensor<f32>,
        bias: Tensor<f32>,
    },
    Residual {
        downsample: bool,
        first: TernaryConvLayer,
        second: TernaryConvLayer,
    },
}

/// Exported model: full-precision first/last layers, packed ternary blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryModel {
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub layers: Vec<FusedLayer>,
}

impl TernaryModel {
    pub fn from_model(model: &Model<f32>, normalization: &Normalization) -> Result<Self> {
        if model.config.mode == QuantMode::Float || model.blocks().iter().all(|(_, b)| !b.is_quantized()) {
            return Err(Error::NothingToFuse(model.config.mode.id().to_string()));
        }
        let mut layers = Vec::new();
        for (i, layer) in model.layers.iter().enumerate() {
            let name = format!("layer{i}");
            layers.push(match layer {
                Layer::Conv(c) => FusedLayer::FloatConv {
                    weight: c.weight.clone(),
                    stride: c.stride,
                    pad: c.pad,
                },
                Layer::Block(b) => FusedLayer::TernaryConv(TernaryConvLayer::from_block(&name, b)?),
                Layer::Residual(u) => FusedLayer::Residual {
                    downsample: u.downsample,
                    first: TernaryConvLayer::from_block(&format!("{name}.first"), &u.first)?,
                    second: TernaryConvLayer::from_block(&format!("{name}.second"), &u.second)?,
                },
                Layer::Relu => FusedLayer::Relu,
                Layer::MaxPool { kernel, stride } => FusedLayer::MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                },
                Layer::GlobalAvgPool => FusedLayer::GlobalAvgPool,
                Layer::Flatten => FusedLayer::Flatten,
                Layer::Linear(l) => FusedLayer::Linear {
                    weight: l.weight.clone(),
                    bias: l.bias.clone(),
                },
            });
        }
        Ok(TernaryModel {
            config: model.config.clone(),
            normalization: normalization.clone(),
            layers,
        })
    }

    /// Ternary layers with their names, in forward order.
    pub fn ternary_layers(&self) -> Vec<&TernaryConvLayer> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                FusedLayer::TernaryConv(t) => out.push(t),
                FusedLayer::Residual { first, second, .. } => {
                    out.push(first);
                    out.push(second);
                }
                _ => {}
            }
        }
        out
    }

    /// Logits of an NCHW batch.
    pub fn forward(&self, input: &Tensor<f32>, parallel: bool) -> Result<Tensor<f32>> {
        let [c, h, w] = self.config.architecture.input_shape();
        match *input.shape() {
            [_, ic, ih, iw] if (ic, ih, iw) == (c, h, w) => {}
            _ => {
                return Err(Error::shape(
                    "ternary_model",
                    format!("expects [n, {c}, {h}, {w}], got {:?}", input.shape()),
                ))
            }
        }
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                FusedLayer::TernaryConv(t) => t.forward(&x, parallel)?,
                FusedLayer::Residual {
                    downsample,
                    first,
                    second,
                } => {
                    let x = if *downsample { float_op(&x, |g, v| g.max_pool2d(v, 2, 2))? } else { x };
                    let y = second.forward(&first.forward(&x, parallel)?, parallel)?;
                    let out_ch = second.kernel.shape[0];
                    let short = if x.shape()[1] < out_ch {
                        float_op(&x, |g, v| g.pad_channels(v, out_ch))?
                    } else {
                        x
                    };
                    y.zip_map(&short, |a, b| (a + b).max(0.0))?
                }
                FusedLayer::FloatConv { weight, stride, pad } => {
                    let (s, p) = (*stride, *pad);
                    let w = weight.clone();
                    float_op(&x, move |g, v| {
                        let w = g.constant(w);
                        g.conv2d(v, w, s, p)
                    })?
                }
                FusedLayer::Relu => float_op(&x, |g, v| g.relu(v))?,
                FusedLayer::MaxPool { kernel, stride } => {
                    let (k, s) = (*kernel, *stride);
                    float_op(&x, move |g, v| g.max_pool2d(v, k, s))?
                }
                FusedLayer::Flatten => float_op(&x, |g, v| g.flatten(v))?,
                FusedLayer::GlobalAvgPool => float_op(&x, |g, v| g.global_avg_pool(v))?,
                FusedLayer::Linear { weight, bias } => {
                    let (w, b) = (weight.clone(), bias.clone());
                    float_op(&x, move |g, v| {
                        let w = g.constant(w);
                        let b = g.constant(b);
                        g.linear(v, w, Some(b))
                    })?
                }
            };
        }
        Ok(x)
    }
}

/// Run one full-precision op through the (tape-free) graph so that it
/// matches the training-time arithmetic exactly.
fn float_op(
    x: &Tensor<f32>,
    op: impl FnOnce(&mut Graph<f32>, crate::autograd::Var) -> Result<crate::autograd::Var>,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = op(&mut g, v)?;
    Ok(g.value(y).clone())
}

/// Worst deviation of one fused layer from the training graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub name: String,
    /// `max |fused - reference| / max(1, |reference|)`.
    pub max_deviation: f64,
}

/// `n` standard-normal images shaped for `arch`.
pub fn probe_batch(arch: Architecture, n: usize, seed: u64) -> Tensor<f32> {
    let [c, h, w] = arch.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![n, c, h, w], |_| StandardNormal.sample(&mut rng))
}

pub fn max_relative_deviation(fused: &Tensor<f32>, reference: &Tensor<f32>) -> Result<f64> {
    fused.expect_same_shape(reference, "equivalence")?;
    Ok(fused
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs() / (b as f64).abs().max(1.0))
        .fold(0.0, f64::max))
}

/// Feed every fused layer the input its training-graph twin saw on `probe`
/// and compare outputs.
pub fn verify_equivalence(
    model: &Model<f32>,
    fused: &TernaryModel,
    probe: Tensor<f32>,
) -> Result<Vec<LayerCheck>> {
    let (_, probes) = model.probe(probe)?;
    let layers = fused.ternary_layers();
    if probes.len() != layers.len() {
        return Err(Error::invalid(
            "verify_equivalence",
            format!("{} training blocks vs {} fused layers", probes.len(), layers.len()),
        ));
    }
    probes
        .iter()
        .zip(layers)
        .map(|(p, layer)| {
            let out = layer.forward(&p.input, false)?;
            Ok(LayerCheck {
                name: p.name.clone(),
                max_deviation: max_relative_deviation(&out, &p.output)?,
            })
        })
        .collect()
}

/// Fuse, pack and verify. Fails with the worst layer if any deviation
/// exceeds [`EQUIVALENCE_TOLERANCE`].
pub fn export_model(
    model: &Model<f32>,
    normalization: &Normalization,
    probe: Tensor<f32>,
) -> Result<(TernaryModel, Vec<LayerCheck>)> {
    let fused = TernaryModel::from_model(model, normalization)?;
    let checks = verify_equivalence(model, &fused, probe)?;
    if let Some(worst) = checks
        .iter()
        .max_by(|a, b| a.max_deviation.total_cmp(&b.max_deviation))
        .filter(|w| !(w.max_deviation <= EQUIVALENCE_TOLERANCE))
    {
        return Err(Error::Equivalence {
            layer: worst.name.clone(),
            deviation: worst.max_deviation,
            tolerance: EQUIVALENCE_TOLERANCE,
        });
    }
    Ok((fused, checks))
}
