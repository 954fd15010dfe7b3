//! Built-in differentiable primitives.

use super::conv::{col2im, im2col, ConvGeometry};
use super::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, MatRef, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum (weight of the newest batch).
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<F>,
    /// Elements per channel.
    pub count: usize,
}

impl<F: Float> Graph<F> {
    /// Cross-correlation of an NCHW batch with an `n×c×kh×kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let mut conv = Conv2d::new(stride, pad);
        conv.input_grad = self.is_tracked(input);
        self.apply1(Box::new(conv), &[input, kernel])
    }

    /// `x · wᵀ + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply1(Box::new(Linear { bias: true }), &[x, w, b]),
            None => self.apply1(Box::new(Linear { bias: false }), &[x, w]),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply1(Box::new(Relu), &[x])
    }

    /// Training-mode batch norm over `[n, c, ...]`; also returns the batch
    /// statistics so the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<F>)> {
        let stats = channel_stats(self.value(x))?;
        let func = BatchNormTrain {
            mean: stats.mean.clone(),
            var: stats.var.clone(),
            eps: F::from_f64(BN_EPS),
            xhat: Vec::new(),
        };
        let y = self.apply1(Box::new(func), &[x, gamma, beta])?;
        Ok((y, stats))
    }

    /// Inference-mode batch norm: a per-channel affine map using fixed
    /// statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
    ) -> Result<Var> {
        let func = BatchNormEval {
            mean: running_mean.to_vec(),
            inv_std: running_var
                .iter()
                .map(|&v| F::one() / (v + F::from_f64(BN_EPS)).sqrt())
                .collect(),
        };
        self.apply1(Box::new(func), &[x, gamma, beta])
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.apply1(
            Box::new(MaxPool2d {
                kernel,
                stride,
                argmax: Vec::new(),
            }),
            &[x],
        )
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply1(
            Box::new(SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs: Vec::new(),
            }),
            &[logits],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply1(Box::new(Add), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply1(Box::new(Mul), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        self.apply1(Box::new(Scale(factor)), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply1(Box::new(Sum), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply1(Box::new(Reshape(shape.to_vec())), &[x])
    }

    /// `[n, c, h, w] -> [n, c*h*w]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.first().ok_or_else(|| Error::shape("flatten", "scalar input"))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Zero-extend the channel dimension of an NCHW tensor to `channels`.
    pub fn pad_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        self.apply1(Box::new(PadChannels(channels)), &[x])
    }

    /// Spatial mean: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply1(Box::new(GlobalAvgPool), &[x])
    }
}

fn channel_layout<F: Float>(x: &Tensor<F>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape(op, format!("expected [n,c] or [n,c,h,w], got {:?}", x.shape()))),
    }
}

fn channel_stats<F: Float>(x: &Tensor<F>) -> Result<BatchStats<F>> {
    let (n, c, hw) = channel_layout(x, "batch_norm")?;
    let count = n * hw;
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    let data = x.data();
    for ch in 0..c {
        let mut s = F::zero();
        for b in 0..n {
            s += data[(b * c + ch) * hw..][..hw].iter().copied().sum::<F>();
        }
        let m = s / F::from_usize(count);
        let mut ss = F::zero();
        for b in 0..n {
            for &v in &data[(b * c + ch) * hw..][..hw] {
                ss += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = ss / F::from_usize(count);
    }
    Ok(BatchStats { mean, var, count })
}

fn check_channel_param<F: Float>(p: &Tensor<F>, c: usize, op: &'static str) -> Result<()> {
    if p.len() != c {
        return Err(Error::shape(op, format!("parameter has {} entries, expected {c}", p.len())));
    }
    Ok(())
}

pub(crate) struct Conv2d<F> {
    stride: usize,
    pad: usize,
    geo: Option<ConvGeometry>,
    cols: Vec<F>,
    /// When false the input gradient is reported as zeros without being
    /// computed (the input is data, not a function of parameters).
    input_grad: bool,
}

impl<F> Conv2d<F> {
    pub(crate) fn new(stride: usize, pad: usize) -> Self {
        Conv2d {
            stride,
            pad,
            geo: None,
            cols: Vec::new(),
            input_grad: true,
        }
    }
}

/// `[out_c, n*p]` (GEMM order) to `[n, out_c, p]` (NCHW order).
fn gemm_to_nchw<F: Float>(src: &[F], n: usize, out_c: usize, p: usize) -> Vec<F> {
    let mut dst = vec![F::zero(); src.len()];
    for o in 0..out_c {
        for b in 0..n {
            dst[(b * out_c + o) * p..][..p].copy_from_slice(&src[o * n * p + b * p..][..p]);
        }
    }
    dst
}

fn nchw_to_gemm<F: Float>(src: &[F], n: usize, out_c: usize, p: usize) -> Vec<F> {
    let mut dst = vec![F::zero(); src.len()];
    for o in 0..out_c {
        for b in 0..n {
            dst[o * n * p + b * p..][..p].copy_from_slice(&src[(b * out_c + o) * p..][..p]);
        }
    }
    dst
}

impl<F: Float> Function<F> for Conv2d<F> {
    fn name(&self) -> &str {
        "conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, c, h, wd) = x.dims4("conv2d")?;
        let (o, kc, kh, kw) = w.dims4("conv2d")?;
        let geo = ConvGeometry::new([n, c, h, wd], [o, kc, kh, kw], self.stride, self.pad)?;
        let cols = im2col(x.data(), &geo);
        let np = n * geo.positions();
        let k = geo.patch_len();
        let mut out = vec![F::zero(); o * np];
        F::gemm(
            o,
            k,
            np,
            F::one(),
            MatRef::row_major(w.data(), k),
            MatRef::row_major(&cols, np),
            F::zero(),
            &mut out,
        );
        self.geo = Some(geo);
        self.cols = cols;
        let data = gemm_to_nchw(&out, n, o, geo.positions());
        Ok(vec![Tensor::new(vec![n, o, geo.out_h, geo.out_w], data)?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let geo = self.geo.expect("forward ran");
        let w = inputs[1];
        let (n, o, k) = (geo.batch, geo.out_channels, geo.patch_len());
        let np = n * geo.positions();
        let g = nchw_to_gemm(grads[0].data(), n, o, geo.positions());

        let mut dw = vec![F::zero(); o * k];
        F::gemm(
            o,
            np,
            k,
            F::one(),
            MatRef::row_major(&g, np),
            MatRef::transposed(&self.cols, np),
            F::zero(),
            &mut dw,
        );
        if !self.input_grad {
            return Ok(vec![
                Tensor::zeros_like(inputs[0]),
                Tensor::new(w.shape().to_vec(), dw)?,
            ]);
        }
        let mut dcols = vec![F::zero(); k * np];
        F::gemm(
            k,
            o,
            np,
            F::one(),
            MatRef::transposed(w.data(), k),
            MatRef::row_major(&g, np),
            F::zero(),
            &mut dcols,
        );
        let dx = col2im(&dcols, &geo);
        Ok(vec![
            Tensor::new(inputs[0].shape().to_vec(), dx)?,
            Tensor::new(w.shape().to_vec(), dw)?,
        ])
    }
}

struct Linear {
    bias: bool,
}

impl<F: Float> Function<F> for Linear {
    fn name(&self) -> &str {
        "linear"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (&[batch, din], &[dout, win]) = (x.shape(), w.shape()) else {
            return Err(Error::shape(
                "linear",
                format!("expected [b,in] x [out,in], got {:?} x {:?}", x.shape(), w.shape()),
            ));
        };
        if din != win {
            return Err(Error::shape("linear", format!("input width {din} vs weight width {win}")));
        }
        let mut out = vec![F::zero(); batch * dout];
        F::gemm(
            batch,
            din,
            dout,
            F::one(),
            MatRef::row_major(x.data(), din),
            MatRef::transposed(w.data(), din),
            F::zero(),
            &mut out,
        );
        if self.bias {
            let b = inputs[2];
            check_channel_param(b, dout, "linear")?;
            for row in out.chunks_mut(dout) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        Ok(vec![Tensor::new(vec![batch, dout], out)?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (batch, din) = (x.shape()[0], x.shape()[1]);
        let dout = w.shape()[0];
        let g = grads[0].data();
        let mut dx = vec![F::zero(); batch * din];
        F::gemm(
            batch,
            dout,
            din,
            F::one(),
            MatRef::row_major(g, dout),
            MatRef::row_major(w.data(), din),
            F::zero(),
            &mut dx,
        );
        let mut dw = vec![F::zero(); dout * din];
        F::gemm(
            dout,
            batch,
            din,
            F::one(),
            MatRef::transposed(g, dout),
            MatRef::row_major(x.data(), din),
            F::zero(),
            &mut dw,
        );
        let mut out = vec![
            Tensor::new(x.shape().to_vec(), dx)?,
            Tensor::new(w.shape().to_vec(), dw)?,
        ];
        if self.bias {
            let mut db = vec![F::zero(); dout];
            for row in g.chunks(dout) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            out.push(Tensor::new(vec![dout], db)?);
        }
        Ok(out)
    }
}

struct Relu;

impl<F: Float> Function<F> for Relu {
    fn name(&self) -> &str {
        "relu"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![inputs[0].map(|v| v.max(F::zero()))])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![grads[0].zip_map(inputs[0], |g, x| {
            if x > F::zero() {
                g
            } else {
                F::zero()
            }
        })?])
    }
}

struct BatchNormTrain<F> {
    mean: Vec<F>,
    var: Vec<F>,
    eps: F,
    xhat: Vec<F>,
}

impl<F: Float> Function<F> for BatchNormTrain<F> {
    fn name(&self) -> &str {
        "batch_norm"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let (n, c, hw) = channel_layout(x, "batch_norm")?;
        check_channel_param(gamma, c, "batch_norm")?;
        check_channel_param(beta, c, "batch_norm")?;
        let mut xhat = vec![F::zero(); x.len()];
        let mut y = vec![F::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let inv = F::one() / (self.var[ch] + self.eps).sqrt();
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let h = (x.data()[i] - self.mean[ch]) * inv;
                    xhat[i] = h;
                    y[i] = gamma.data()[ch] * h + beta.data()[ch];
                }
            }
        }
        self.xhat = xhat;
        Ok(vec![Tensor::new(x.shape().to_vec(), y)?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, hw) = channel_layout(x, "batch_norm")?;
        let g = grads[0].data();
        let m = F::from_usize(n * hw);
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dbeta[ch] += g[i];
                    dgamma[ch] += g[i] * self.xhat[i];
                }
            }
        }
        let mut dx = vec![F::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let inv = F::one() / (self.var[ch] + self.eps).sqrt();
                let k = gamma.data()[ch] * inv / m;
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dx[i] = k * (m * g[i] - dbeta[ch] - self.xhat[i] * dgamma[ch]);
                }
            }
        }
        Ok(vec![
            Tensor::new(x.shape().to_vec(), dx)?,
            Tensor::new(vec![c], dgamma)?,
            Tensor::new(vec![c], dbeta)?,
        ])
    }
}

struct BatchNormEval<F> {
    mean: Vec<F>,
    inv_std: Vec<F>,
}

impl<F: Float> Function<F> for BatchNormEval<F> {
    fn name(&self) -> &str {
        "batch_norm_eval"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let (n, c, hw) = channel_layout(x, "batch_norm_eval")?;
        for p in [gamma, beta] {
            check_channel_param(p, c, "batch_norm_eval")?;
        }
        if self.mean.len() != c || self.inv_std.len() != c {
            return Err(Error::shape("batch_norm_eval", "running statistics length"));
        }
        let mut y = vec![F::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let a = gamma.data()[ch] * self.inv_std[ch];
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    y[i] = a * (x.data()[i] - self.mean[ch]) + beta.data()[ch];
                }
            }
        }
        Ok(vec![Tensor::new(x.shape().to_vec(), y)?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, hw) = channel_layout(x, "batch_norm_eval")?;
        let g = grads[0].data();
        let mut dx = vec![F::zero(); x.len()];
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let h = (x.data()[i] - self.mean[ch]) * self.inv_std[ch];
                    dx[i] = g[i] * gamma.data()[ch] * self.inv_std[ch];
                    dgamma[ch] += g[i] * h;
                    dbeta[ch] += g[i];
                }
            }
        }
        Ok(vec![
            Tensor::new(x.shape().to_vec(), dx)?,
            Tensor::new(vec![c], dgamma)?,
            Tensor::new(vec![c], dbeta)?,
        ])
    }
}

struct MaxPool2d {
    kernel: usize,
    stride: usize,
    argmax: Vec<usize>,
}

impl<F: Float> Function<F> for MaxPool2d {
    fn name(&self) -> &str {
        "max_pool2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4("max_pool2d")?;
        if self.kernel == 0 || self.stride == 0 || self.kernel > h || self.kernel > w {
            return Err(Error::invalid(
                "max_pool2d",
                format!("kernel {} stride {} on {h}x{w}", self.kernel, self.stride),
            ));
        }
        let oh = (h - self.kernel) / self.stride + 1;
        let ow = (w - self.kernel) / self.stride + 1;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * self.stride * w + ox * self.stride;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let idx = base + (oy * self.stride + ky) * w + ox * self.stride + kx;
                            if x.data()[idx] > x.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        self.argmax = argmax;
        Ok(vec![Tensor::new(vec![n, c, oh, ow], out)?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let mut dx = Tensor::zeros_like(inputs[0]);
        for (&src, &g) in self.argmax.iter().zip(grads[0].data()) {
            dx.data_mut()[src] += g;
        }
        Ok(vec![dx])
    }
}

struct SoftmaxCrossEntropy<F> {
    labels: Vec<usize>,
    probs: Vec<F>,
}

impl<F: Float> Function<F> for SoftmaxCrossEntropy<F> {
    fn name(&self) -> &str {
        "softmax_cross_entropy"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let logits = inputs[0];
        let &[batch, classes] = logits.shape() else {
            return Err(Error::shape("softmax_cross_entropy", format!("{:?}", logits.shape())));
        };
        if self.labels.len() != batch {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch {batch}", self.labels.len()),
            ));
        }
        let mut probs = vec![F::zero(); batch * classes];
        let mut loss = F::zero();
        for (b, &label) in self.labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("label {label} out of range for {classes} classes"),
                ));
            }
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for (p, &v) in probs[b * classes..].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            loss += log_z - row[label];
        }
        self.probs = probs;
        Ok(vec![Tensor::scalar(loss / F::from_usize(batch))])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let shape = inputs[0].shape();
        let (batch, classes) = (shape[0], shape[1]);
        let scale = grads[0].data()[0] / F::from_usize(batch);
        let mut d = self.probs.clone();
        for (b, &label) in self.labels.iter().enumerate() {
            d[b * classes + label] -= F::one();
        }
        for v in &mut d {
            *v *= scale;
        }
        Ok(vec![Tensor::new(shape.to_vec(), d)?])
    }
}

struct Add;

impl<F: Float> Function<F> for Add {
    fn name(&self) -> &str {
        "add"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![inputs[0].zip_map(inputs[1], |a, b| a + b)?])
    }

    fn backward(&self, _: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![grads[0].clone(), grads[0].clone()])
    }
}

struct Mul;

impl<F: Float> Function<F> for Mul {
    fn name(&self) -> &str {
        "mul"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![inputs[0].zip_map(inputs[1], |a, b| a * b)?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![
            grads[0].zip_map(inputs[1], |g, b| g * b)?,
            grads[0].zip_map(inputs[0], |g, a| g * a)?,
        ])
    }
}

struct Scale<F>(F);

impl<F: Float> Function<F> for Scale<F> {
    fn name(&self) -> &str {
        "scale"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let s = self.0;
        Ok(vec![inputs[0].map(|v| v * s)])
    }

    fn backward(&self, _: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let s = self.0;
        Ok(vec![grads[0].map(|g| g * s)])
    }
}

struct Sum;

impl<F: Float> Function<F> for Sum {
    fn name(&self) -> &str {
        "sum"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![Tensor::scalar(inputs[0].sum())])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![Tensor::full(inputs[0].shape().to_vec(), grads[0].data()[0])])
    }
}

struct Reshape(Vec<usize>);

impl<F: Float> Function<F> for Reshape {
    fn name(&self) -> &str {
        "reshape"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![inputs[0].clone().reshape(self.0.clone())?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![grads[0].clone().reshape(inputs[0].shape().to_vec())?])
    }
}

struct PadChannels(usize);

impl<F: Float> Function<F> for PadChannels {
    fn name(&self) -> &str {
        "pad_channels"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4("pad_channels")?;
        if self.0 < c {
            return Err(Error::invalid("pad_channels", format!("{c} -> {} channels", self.0)));
        }
        let plane = h * w;
        let mut out = vec![F::zero(); n * self.0 * plane];
        for b in 0..n {
            out[b * self.0 * plane..][..c * plane]
                .copy_from_slice(&x.data()[b * c * plane..][..c * plane]);
        }
        Ok(vec![Tensor::new(vec![n, self.0, h, w], out)?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (n, c, h, w) = inputs[0].dims4("pad_channels")?;
        let plane = h * w;
        let mut dx = Vec::with_capacity(n * c * plane);
        for b in 0..n {
            dx.extend_from_slice(&grads[0].data()[b * self.0 * plane..][..c * plane]);
        }
        Ok(vec![Tensor::new(vec![n, c, h, w], dx)?])
    }
}

struct GlobalAvgPool;

impl<F: Float> Function<F> for GlobalAvgPool {
    fn name(&self) -> &str {
        "global_avg_pool"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (n, c, h, w) = inputs[0].dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = F::one() / F::from_usize(plane);
        let out = inputs[0]
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        Ok(vec![Tensor::new(vec![n, c], out)?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let (n, c, h, w) = inputs[0].dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = F::one() / F::from_usize(plane);
        let mut dx = Vec::with_capacity(n * c * plane);
        for &g in grads[0].data() {
            dx.extend(std::iter::repeat_n(g * inv, plane));
        }
        Ok(vec![Tensor::new(vec![n, c, h, w], dx)?])
    }
}
