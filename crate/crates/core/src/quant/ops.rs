//! Quantizers as graph nodes.

use super::{
    sttn_backward_pair, sttn_quantize_pair, ste_pass, ternarize_activation, ternarize_backward,
    twn_quantize, GradMode, LatentKernelPair, TwnMode,
};
use crate::autograd::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// `(w1, w2) -> (alpha*sign(w1), alpha*sign(w2))` with the shared-scale
/// backward rule. The scale is recomputed on every forward.
pub struct SttnPairFn<F> {
    mode: GradMode,
    pair: Option<LatentKernelPair<F>>,
}

impl<F> SttnPairFn<F> {
    pub fn new(mode: GradMode) -> Self {
        SttnPairFn { mode, pair: None }
    }
}

impl<F: Float> Function<F> for SttnPairFn<F> {
    fn name(&self) -> &str {
        "sttn_pair"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let pair = LatentKernelPair::new(inputs[0].clone(), inputs[1].clone())?;
        let (view, _) = sttn_quantize_pair(&pair)?;
        self.pair = Some(pair);
        Ok(vec![view.w_tilde1(), view.w_tilde2()])
    }

    fn backward(&self, _: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let pair = self
            .pair
            .as_ref()
            .ok_or_else(|| Error::invalid("sttn_pair", "backward before forward"))?;
        let (d1, d2) = sttn_backward_pair(&grads[0], &grads[1], pair, self.mode)?;
        Ok(vec![d1, d2])
    }
}

/// Ternary activation with a clipped straight-through backward.
pub struct TernarizeFn;

impl<F: Float> Function<F> for TernarizeFn {
    fn name(&self) -> &str {
        "ternarize"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![ternarize_activation(inputs[0])?.xt])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![ternarize_backward(inputs[0], &grads[0])?])
    }
}

/// Hard-threshold weights `alpha * t` (heuristic threshold) with a clipped
/// straight-through backward.
pub struct TwnWeightsFn;

impl<F: Float> Function<F> for TwnWeightsFn {
    fn name(&self) -> &str {
        "twn_weights"
    }

    fn forward(&mut self, inputs: &[&Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let w = inputs[0];
        let r = twn_quantize(w.data(), TwnMode::Heuristic)?;
        let data = r
            .t
            .iter()
            .map(|&s| r.alpha * F::from_f64(s as f64))
            .collect();
        Ok(vec![Tensor::new(w.shape().to_vec(), data)?])
    }

    fn backward(&self, inputs: &[&Tensor<F>], grads: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        Ok(vec![grads[0].zip_map(inputs[0], |g, w| {
            if ste_pass(w) {
                g
            } else {
                F::zero()
            }
        })?])
    }
}

impl<F: Float> Graph<F> {
    /// Quantized views of a latent pair.
    pub fn sttn_pair(&mut self, w1: Var, w2: Var, mode: GradMode) -> Result<(Var, Var)> {
        let out = self.apply(Box::new(SttnPairFn::new(mode)), &[w1, w2])?;
        Ok((out[0], out[1]))
    }

    pub fn ternarize(&mut self, x: Var) -> Result<Var> {
        self.apply1(Box::new(TernarizeFn), &[x])
    }

    pub fn twn_weights(&mut self, w: Var) -> Result<Var> {
        self.apply1(Box::new(TwnWeightsFn), &[w])
    }
}
