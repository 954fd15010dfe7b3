use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{Model, ParamKind};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_LR: f64 = 0.005;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-6;

/// `0.5 * base_lr * (1 + cos(pi * epoch / total_epochs))`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let e = epoch.min(total_epochs) as f64;
    0.5 * base_lr * (1.0 + (PI * e / total_epochs as f64).cos())
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct OptimState<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Float> Default for OptimState<F> {
    fn default() -> Self {
        Self::new(DEFAULT_WEIGHT_DECAY)
    }
}

impl<F: Float> OptimState<F> {
    pub fn new(weight_decay: f64) -> Self {
        OptimState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn check(&mut self, shapes: &[&[usize]], grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("adam_step", format!("learning rate {lr} must be positive")));
        }
        if shapes.len() != grads.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("{} parameters but {} gradients", shapes.len(), grads.len()),
            ));
        }
        for (i, (s, g)) in shapes.iter().zip(grads).enumerate() {
            if *s != g.shape() {
                return Err(Error::shape("adam_step", format!("parameter {i}: {s:?} vs gradient {:?}", g.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(Tensor::zeros_like).collect();
            self.v = grads.iter().map(Tensor::zeros_like).collect();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.shape() != g.shape()) {
            return Err(Error::shape("adam_step", "parameter set changed between steps"));
        }
        Ok(())
    }

    fn update(&mut self, i: usize, decays: bool, p: &mut Tensor<F>, g: &Tensor<F>, lr: f64) {
        let t = self.step as i32;
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let c1 = F::from_f64(1.0 - self.beta1.powi(t));
        let c2 = F::from_f64(1.0 - self.beta2.powi(t));
        let lr = F::from_f64(lr);
        let eps = F::from_f64(self.eps);
        let wd = if decays { F::from_f64(self.weight_decay) } else { F::zero() };
        let one = F::one();
        let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
        }
    }

    /// One update of bare tensors. `decays[i]` selects weight decay.
    /// Nothing is mutated if any gradient is non-finite.
    pub fn step_tensors(
        &mut self,
        params: &mut [Tensor<F>],
        decays: &[bool],
        grads: &[Tensor<F>],
        lr: f64,
    ) -> Result<()> {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        self.check(&shapes, grads, lr)?;
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            self.update(i, decays.get(i).copied().unwrap_or(false), p, &grads[i], lr);
        }
        Ok(())
    }

    /// One update of every model parameter; `grads` follow the model's
    /// parameter order. Latent pair scales are refreshed afterwards.
    pub fn step_model(&mut self, model: &mut Model<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        let mut shapes = Vec::new();
        model.visit_params(&mut |_, _, t| shapes.push(t.shape().to_vec()));
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        self.check(&shape_refs, grads, lr)?;
        self.step += 1;
        let mut i = 0;
        model.visit_params_mut(&mut |_, kind: ParamKind, p| {
            self.update(i, kind.decays(), p, &grads[i], lr);
            i += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0.005, 0, 20), 0.005);
        assert!((cosine_lr(0.005, 10, 20) - 0.0025).abs() < 1e-15);
        assert!(cosine_lr(0.005, 20, 20).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=20).map(|e| cosine_lr(0.005, e, 20)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut opt = OptimState::<f64>::new(1e-6);
        let mut p = vec![Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(vec![2])];
        opt.step_tensors(&mut p, &[true], &g, 0.005).unwrap();
        let shrink = 1.0 - 0.005 * 1e-6;
        assert_eq!(p[0].data(), &[shrink, -2.0 * shrink]);
        let mut q = vec![Tensor::from_f64(vec![1], &[3.0]).unwrap()];
        opt = OptimState::new(1e-6);
        opt.step_tensors(&mut q, &[false], &[Tensor::zeros(vec![1])], 0.005).unwrap();
        assert_eq!(q[0].data(), &[3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected m/sqrt(v) is exactly g/|g| on step one.
        let mut opt = OptimState::<f64>::new(0.0);
        let mut p = vec![Tensor::from_f64(vec![1], &[0.5]).unwrap()];
        opt.step_tensors(&mut p, &[true], &[Tensor::from_f64(vec![1], &[1.0]).unwrap()], 0.005)
            .unwrap();
        let expect = 0.5 - 0.005 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_gradient_leaves_params_alone() {
        let mut opt = OptimState::<f64>::default();
        let mut p = vec![
            Tensor::from_f64(vec![1], &[1.0]).unwrap(),
            Tensor::from_f64(vec![1], &[2.0]).unwrap(),
        ];
        let g = vec![
            Tensor::from_f64(vec![1], &[1.0]).unwrap(),
            Tensor::from_f64(vec![1], &[f64::NAN]).unwrap(),
        ];
        assert!(matches!(opt.step_tensors(&mut p, &[true, true], &g, 0.005), Err(Error::NonFinite(_))));
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn rejects_bad_lr() {
        let mut opt = OptimState::<f64>::default();
        let mut p = vec![Tensor::zeros(vec![1])];
        assert!(opt.step_tensors(&mut p, &[true], &[Tensor::zeros(vec![1])], 0.0).is_err());
    }
}
