use rand::Rng;

use super::model::BlockProbe;
use super::{he_init, ParamKind, QuantMode};
use crate::autograd::{BatchStats, Graph, Var, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::quant::{GradMode, LatentKernelPair};
use crate::tensor::{Float, Tensor};

/// Per-forward state threaded through the layers.
pub(crate) struct Ctx<F> {
    pub train: bool,
    /// Graph leaves for every parameter, in visiting order.
    pub binds: Vec<Var>,
    /// Batch statistics of every BN layer, in visiting order (train only).
    pub stats: Vec<BatchStats<F>>,
    pub probes: Option<Vec<BlockProbe<F>>>,
}

impl<F: Float> Ctx<F> {
    pub fn new(train: bool, probe: bool) -> Self {
        Ctx {
            train,
            binds: Vec::new(),
            stats: Vec::new(),
            probes: probe.then(Vec::new),
        }
    }

    fn bind(&mut self, g: &mut Graph<F>, value: &Tensor<F>) -> Var {
        let v = g.leaf(value.clone(), self.train);
        self.binds.push(v);
        v
    }
}

pub(crate) type ParamFn<'a, F> = dyn FnMut(String, ParamKind, &Tensor<F>) + 'a;
pub(crate) type ParamMutFn<'a, F> = dyn FnMut(String, ParamKind, &mut Tensor<F>) + 'a;
pub(crate) type BufferFn<'a, F> = dyn FnMut(String, &[F]) + 'a;
pub(crate) type BufferMutFn<'a, F> = dyn FnMut(String, &mut Vec<F>) + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply<F: Float>(self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::None => Ok(x),
        }
    }
}

/// Batch norm with learned affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

impl<F: Float> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn forward(&self, g: &mut Graph<F>, x: Var, ctx: &mut Ctx<F>) -> Result<Var> {
        let gamma = ctx.bind(g, &self.gamma);
        let beta = ctx.bind(g, &self.beta);
        if ctx.train {
            let (y, stats) = g.batch_norm_train(x, gamma, beta)?;
            ctx.stats.push(stats);
            Ok(y)
        } else {
            g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var)
        }
    }

    /// Fold one batch into the running estimates. The running variance is
    /// the unbiased one.
    pub(crate) fn update(&mut self, stats: &BatchStats<F>) {
        let m = F::from_f64(BN_MOMENTUM);
        let keep = F::one() - m;
        let bessel = if stats.count > 1 {
            F::from_usize(stats.count) / F::from_usize(stats.count - 1)
        } else {
            F::one()
        };
        for (r, &v) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * v * bessel;
        }
    }

    fn visit(&self, prefix: &str, f: &mut ParamFn<'_, F>) {
        f(format!("{prefix}.gamma"), ParamKind::BnGamma, &self.gamma);
        f(format!("{prefix}.beta"), ParamKind::BnBeta, &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamMutFn<'_, F>) {
        f(format!("{prefix}.gamma"), ParamKind::BnGamma, &mut self.gamma);
        f(format!("{prefix}.beta"), ParamKind::BnBeta, &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut BufferFn<'_, F>) {
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut BufferMutFn<'_, F>) {
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}

/// Full-precision convolution without bias.
#[derive(Clone, Debug)]
pub struct FloatConv<F> {
    pub weight: Tensor<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Float> FloatConv<F> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        FloatConv {
            weight: he_init(vec![out_ch, in_ch, k, k], in_ch * k * k, rng),
            stride,
            pad,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph<F>, x: Var, ctx: &mut Ctx<F>) -> Result<Var> {
        let w = ctx.bind(g, &self.weight);
        g.conv2d(x, w, self.stride, self.pad)
    }
}

/// Full-precision affine layer.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    /// `[out, in]`.
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Float> Linear<F> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: he_init(vec![outputs, inputs], inputs, rng),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph<F>, x: Var, ctx: &mut Ctx<F>) -> Result<Var> {
        let w = ctx.bind(g, &self.weight);
        let b = ctx.bind(g, &self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Kernel storage of a block, one variant per quantization mode.
#[derive(Clone, Debug)]
pub enum BlockWeights<F> {
    Float(Tensor<F>),
    Sttn(LatentKernelPair<F>),
    Twn(Tensor<F>),
}

/// `BN -> input quantizer -> conv (two binary branches summed in STTN
/// modes) -> activation`.
#[derive(Clone, Debug)]
pub struct QuantConvBlock<F> {
    pub bn: BatchNorm<F>,
    pub weights: BlockWeights<F>,
    pub mode: QuantMode,
    pub grad_mode: GradMode,
    pub stride: usize,
    pub pad: usize,
    pub post_activation: Activation,
}

/// Build one block. STTN modes draw the two latent kernels independently.
#[allow(clippy::too_many_arguments)]
pub fn build_block<F: Float, R: Rng + ?Sized>(
    in_ch: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: QuantMode,
    rng: &mut R,
) -> Result<QuantConvBlock<F>> {
    if in_ch == 0 || out_ch == 0 || kh == 0 || kw == 0 {
        return Err(Error::invalid(
            "build_block",
            format!("channels and kernel extents must be >= 1 (got {in_ch}->{out_ch}, {kh}x{kw})"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("build_block", "stride must be >= 1"));
    }
    let shape = vec![out_ch, in_ch, kh, kw];
    let fan_in = in_ch * kh * kw;
    let weights = match mode {
        QuantMode::Float => BlockWeights::Float(he_init(shape, fan_in, rng)),
        QuantMode::Sttn22 | QuantMode::Sttn232 => {
            let w1 = he_init(shape.clone(), fan_in, rng);
            let w2 = he_init(shape, fan_in, rng);
            BlockWeights::Sttn(LatentKernelPair::new(w1, w2)?)
        }
        QuantMode::TwnBaseline => BlockWeights::Twn(he_init(shape, fan_in, rng)),
    };
    Ok(QuantConvBlock {
        bn: BatchNorm::new(in_ch),
        weights,
        mode,
        grad_mode: GradMode::default(),
        stride,
        pad,
        post_activation: Activation::Relu,
    })
}

impl<F: Float> QuantConvBlock<F> {
    /// `[out, in, kh, kw]`.
    pub fn kernel_shape(&self) -> &[usize] {
        match &self.weights {
            BlockWeights::Float(w) | BlockWeights::Twn(w) => w.shape(),
            BlockWeights::Sttn(pair) => pair.shape(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self.weights, BlockWeights::Float(_))
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph<F>,
        x: Var,
        name: &str,
        ctx: &mut Ctx<F>,
    ) -> Result<Var> {
        let h = self.bn.forward(g, x, ctx)?;
        let h = match self.mode {
            QuantMode::Float => g.relu(h)?,
            QuantMode::Sttn22 | QuantMode::TwnBaseline => g.ternarize(h)?,
            QuantMode::Sttn232 => h,
        };
        let y = self.conv(g, h, ctx)?;
        let out = self.post_activation.apply(g, y)?;
        if let Some(probes) = ctx.probes.as_mut() {
            probes.push(BlockProbe {
                name: name.to_string(),
                input: g.value(x).clone(),
                output: g.value(out).clone(),
            });
        }
        Ok(out)
    }

    /// The convolution stage alone, on an already quantized input.
    pub(crate) fn conv(&self, g: &mut Graph<F>, h: Var, ctx: &mut Ctx<F>) -> Result<Var> {
        match &self.weights {
            BlockWeights::Float(w) => {
                let w = ctx.bind(g, w);
                g.conv2d(h, w, self.stride, self.pad)
            }
            BlockWeights::Sttn(pair) => {
                let w1 = ctx.bind(g, pair.w1());
                let w2 = ctx.bind(g, pair.w2());
                let (q1, q2) = g.sttn_pair(w1, w2, self.grad_mode)?;
                let y1 = g.conv2d(h, q1, self.stride, self.pad)?;
                let y2 = g.conv2d(h, q2, self.stride, self.pad)?;
                g.add(y1, y2)
            }
            BlockWeights::Twn(w) => {
                let w = ctx.bind(g, w);
                let q = g.twn_weights(w)?;
                g.conv2d(h, q, self.stride, self.pad)
            }
        }
    }

    /// Output of the two-branch convolution stage for a given (already
    /// quantized) input, without BN or activation. Runs without a tape.
    pub fn conv_output(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(false, false);
        let x = g.constant(input.clone());
        let y = self.conv(&mut g, x, &mut ctx)?;
        Ok(g.value(y).clone())
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut ParamFn<'_, F>) {
        self.bn.visit(&format!("{prefix}.bn"), f);
        match &self.weights {
            BlockWeights::Float(w) => f(format!("{prefix}.weight"), ParamKind::Weight, w),
            BlockWeights::Sttn(pair) => {
                f(format!("{prefix}.w1"), ParamKind::Latent, pair.w1());
                f(format!("{prefix}.w2"), ParamKind::Latent, pair.w2());
            }
            BlockWeights::Twn(w) => f(format!("{prefix}.weight"), ParamKind::Latent, w),
        }
    }

    /// Mutable parameter walk; the pair's scale is refreshed afterwards.
    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut ParamMutFn<'_, F>) {
        self.bn.visit_mut(&format!("{prefix}.bn"), f);
        match &mut self.weights {
            BlockWeights::Float(w) => f(format!("{prefix}.weight"), ParamKind::Weight, w),
            BlockWeights::Sttn(pair) => {
                f(format!("{prefix}.w1"), ParamKind::Latent, pair.w1_mut());
                f(format!("{prefix}.w2"), ParamKind::Latent, pair.w2_mut());
                pair.refresh();
            }
            BlockWeights::Twn(w) => f(format!("{prefix}.weight"), ParamKind::Latent, w),
        }
    }

    pub(crate) fn visit_buffers(&self, prefix: &str, f: &mut BufferFn<'_, F>) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }

    pub(crate) fn visit_buffers_mut(&mut self, prefix: &str, f: &mut BufferMutFn<'_, F>) {
        self.bn.visit_buffers_mut(&format!("{prefix}.bn"), f);
    }

    pub(crate) fn for_each_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<F>)) {
        f(&mut self.bn);
    }
}

/// `relu(second(first(x')) + shortcut(x'))` where `x'` is `x` optionally
/// max-pooled 2×2 and the shortcut zero-extends channels.
#[derive(Clone, Debug)]
pub struct ResidualUnit<F> {
    pub downsample: bool,
    pub first: QuantConvBlock<F>,
    pub second: QuantConvBlock<F>,
}

impl<F: Float> ResidualUnit<F> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        downsample: bool,
        mode: QuantMode,
        rng: &mut R,
    ) -> Result<Self> {
        if out_ch < in_ch {
            return Err(Error::invalid(
                "residual_unit",
                format!("channels may not shrink ({in_ch} -> {out_ch})"),
            ));
        }
        let first = build_block(in_ch, out_ch, 3, 3, 1, 1, mode, rng)?;
        let mut second = build_block(out_ch, out_ch, 3, 3, 1, 1, mode, rng)?;
        second.post_activation = Activation::None;
        Ok(ResidualUnit {
            downsample,
            first,
            second,
        })
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph<F>,
        x: Var,
        name: &str,
        ctx: &mut Ctx<F>,
    ) -> Result<Var> {
        let x = if self.downsample { g.max_pool2d(x, 2, 2)? } else { x };
        let h = self.first.forward(g, x, &format!("{name}.first"), ctx)?;
        let h = self.second.forward(g, h, &format!("{name}.second"), ctx)?;
        let out_ch = self.second.kernel_shape()[0];
        let shortcut = if g.shape(x)[1] < out_ch {
            g.pad_channels(x, out_ch)?
        } else {
            x
        };
        let sum = g.add(h, shortcut)?;
        g.relu(sum)
    }

    pub(crate) fn blocks(&self) -> [&QuantConvBlock<F>; 2] {
        [&self.first, &self.second]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut QuantConvBlock<F>; 2] {
        [&mut self.first, &mut self.second]
    }
}
