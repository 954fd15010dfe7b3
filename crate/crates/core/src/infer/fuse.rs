use crate::error::{Error, Result};
use crate::quant::{shared_alpha, sttn_quantize_pair, twn_quantize, LatentKernelPair, TwnMode};
use crate::tensor::{Float, Tensor};

/// Inference kernel: entries in `{-1, 0, +1}` and one positive scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryKernel<F> {
    pub t: Vec<i8>,
    /// `[out, in, kh, kw]`.
    pub shape: Vec<usize>,
    pub scale: F,
}

impl<F: Float> TernaryKernel<F> {
    /// `scale * t` as a dense tensor.
    pub fn weights(&self) -> Tensor<F> {
        let data = self.t.iter().map(|&v| self.scale * F::from_f64(v as f64)).collect();
        Tensor::new(self.shape.clone(), data).expect("kernel shape")
    }

    pub fn zeros(&self) -> usize {
        self.t.iter().filter(|&&v| v == 0).count()
    }

    pub fn sparsity(&self) -> f64 {
        self.zeros() as f64 / self.t.len() as f64
    }
}

/// `(b1 + b2) / 2` for sign vectors.
pub fn fuse_signs(b1: &[i8], b2: &[i8]) -> Vec<i8> {
    b1.iter().zip(b2).map(|(&a, &b)| (a + b) / 2).collect()
}

/// Sum the two binary kernels of a pair into one ternary kernel with
/// scale `2 * alpha`.
pub fn fuse<F: Float>(pair: &LatentKernelPair<F>) -> Result<TernaryKernel<F>> {
    let current = shared_alpha(pair.w1().data(), pair.w2().data());
    if current != pair.alpha() {
        return Err(Error::StaleAlpha {
            stored: pair.alpha().as_f64(),
            current: current.as_f64(),
        });
    }
    let (view, alpha) = sttn_quantize_pair(pair)?;
    Ok(TernaryKernel {
        t: fuse_signs(&view.b1, &view.b2),
        shape: view.shape,
        scale: alpha + alpha,
    })
}

/// Hard-threshold kernel of a single latent tensor (heuristic threshold).
pub fn fuse_twn<F: Float>(w: &Tensor<F>) -> Result<TernaryKernel<F>> {
    let r = twn_quantize(w.data(), TwnMode::Heuristic)?;
    Ok(TernaryKernel {
        t: r.t,
        shape: w.shape().to_vec(),
        scale: r.alpha,
    })
}
