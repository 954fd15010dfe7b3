//! Quantization math: the shared-scale binary pair, its exact backward
//! rule, ternary activations, the hard-threshold (TWN) baseline, and the
//! exact ternary approximation oracle.
//!
//! Conventions used throughout:
//! * `sign(0) = +1`.
//! * One scale per kernel pair (per layer), averaged over both kernels.
//! * Straight-through estimators pass the gradient where `|x| <= 1`.

mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use ops::{SttnPairFn, TernarizeFn, TwnWeightsFn};

/// Ternary activation threshold: `|x| > 0.5` maps to `sign(x)`.
pub const ACTIVATION_THRESHOLD: f64 = 0.5;
/// Heuristic TWN threshold factor: `delta = 0.7 * mean(|w|)`.
pub const TWN_DELTA_FACTOR: f64 = 0.7;

/// `+1` for `x >= 0`, else `-1`.
#[inline]
pub fn sign<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one()
    } else {
        -F::one()
    }
}

#[inline]
pub fn sign_i8<F: Float>(x: F) -> i8 {
    if x >= F::zero() {
        1
    } else {
        -1
    }
}

/// Straight-through gate: 1 where `|x| <= 1`.
#[inline]
pub fn ste_pass<F: Float>(x: F) -> bool {
    x.abs() <= F::one()
}

/// Which backward rule the binary pair uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// The scale-coupling term sums over both kernels; the sign STE term
    /// only touches the element itself.
    #[default]
    Consistent,
    /// The second term multiplies by the sum of all upstream gradients,
    /// exactly as the formula is printed. Kept for ablations.
    PaperLiteral,
}

/// `(sum |w1| + sum |w2|) / (2N)`.
pub fn shared_alpha<F: Float>(w1: &[F], w2: &[F]) -> F {
    let total: F = w1.iter().chain(w2).map(|v| v.abs()).sum();
    total / F::from_usize(2 * w1.len())
}

/// Two latent float kernels of identical shape and their shared scale.
#[derive(Clone, Debug)]
pub struct LatentKernelPair<F> {
    w1: Tensor<F>,
    w2: Tensor<F>,
    alpha: F,
}

impl<F: Float> LatentKernelPair<F> {
    pub fn new(w1: Tensor<F>, w2: Tensor<F>) -> Result<Self> {
        w1.expect_same_shape(&w2, "latent pair")?;
        if !(w1.all_finite() && w2.all_finite()) {
            return Err(Error::NonFinite("latent kernel pair".into()));
        }
        let alpha = shared_alpha(w1.data(), w2.data());
        Ok(LatentKernelPair { w1, w2, alpha })
    }

    pub fn w1(&self) -> &Tensor<F> {
        &self.w1
    }

    pub fn w2(&self) -> &Tensor<F> {
        &self.w2
    }

    /// Mutable access to the first latent kernel. The stored scale is not
    /// updated until [`refresh`](Self::refresh).
    pub fn w1_mut(&mut self) -> &mut Tensor<F> {
        &mut self.w1
    }

    pub fn w2_mut(&mut self) -> &mut Tensor<F> {
        &mut self.w2
    }

    pub fn alpha(&self) -> F {
        self.alpha
    }

    pub fn refresh(&mut self) {
        self.alpha = shared_alpha(self.w1.data(), self.w2.data());
    }

    pub fn shape(&self) -> &[usize] {
        self.w1.shape()
    }

    /// Element count of each kernel.
    pub fn len(&self) -> usize {
        self.w1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w1.is_empty()
    }
}

/// Sign kernels of a pair plus the scale that turns them into weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryView<F> {
    pub b1: Vec<i8>,
    pub b2: Vec<i8>,
    pub alpha: F,
    pub shape: Vec<usize>,
}

impl<F: Float> BinaryView<F> {
    fn scaled(&self, b: &[i8]) -> Tensor<F> {
        let data = b
            .iter()
            .map(|&s| if s > 0 { self.alpha } else { -self.alpha })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("view shape")
    }

    /// `alpha * b1`.
    pub fn w_tilde1(&self) -> Tensor<F> {
        self.scaled(&self.b1)
    }

    /// `alpha * b2`.
    pub fn w_tilde2(&self) -> Tensor<F> {
        self.scaled(&self.b2)
    }
}

/// Forward quantization of a pair: optimal signs and the shared scale that
/// minimises `|w1 - a b1|^2 + |w2 - a b2|^2`.
pub fn sttn_quantize_pair<F: Float>(pair: &LatentKernelPair<F>) -> Result<(BinaryView<F>, F)> {
    if pair.is_empty() {
        return Err(Error::invalid("sttn_quantize_pair", "empty kernels"));
    }
    if !(pair.w1.all_finite() && pair.w2.all_finite()) {
        return Err(Error::NonFinite("sttn_quantize_pair".into()));
    }
    let alpha = shared_alpha(pair.w1.data(), pair.w2.data());
    let view = BinaryView {
        b1: pair.w1.data().iter().map(|&v| sign_i8(v)).collect(),
        b2: pair.w2.data().iter().map(|&v| sign_i8(v)).collect(),
        alpha,
        shape: pair.shape().to_vec(),
    };
    Ok((view, alpha))
}

/// Gradients of the latent kernels given upstream gradients of the
/// quantized views `alpha * sign(w1)` and `alpha * sign(w2)`.
pub fn sttn_backward_pair<F: Float>(
    g1: &Tensor<F>,
    g2: &Tensor<F>,
    pair: &LatentKernelPair<F>,
    mode: GradMode,
) -> Result<(Tensor<F>, Tensor<F>)> {
    g1.expect_same_shape(&pair.w1, "sttn_backward_pair")?;
    g2.expect_same_shape(&pair.w2, "sttn_backward_pair")?;
    let current = shared_alpha(pair.w1.data(), pair.w2.data());
    if current != pair.alpha {
        return Err(Error::StaleAlpha {
            stored: pair.alpha.as_f64(),
            current: current.as_f64(),
        });
    }
    let inv_2n = F::one() / F::from_usize(2 * pair.len());
    let signed_sum = |g: &Tensor<F>, w: &Tensor<F>| -> F {
        g.data()
            .iter()
            .zip(w.data())
            .map(|(&gv, &wv)| gv * sign(wv))
            .sum()
    };
    // Coupling through alpha: every element sees the signed sum over both kernels.
    let coupling = (signed_sum(g1, &pair.w1) + signed_sum(g2, &pair.w2)) * inv_2n;
    let total = g1.sum() + g2.sum();
    let alpha = pair.alpha;
    let grad = |g: &Tensor<F>, w: &Tensor<F>| -> Tensor<F> {
        let data = g
            .data()
            .iter()
            .zip(w.data())
            .map(|(&gv, &wv)| {
                let through = match mode {
                    GradMode::Consistent => gv,
                    GradMode::PaperLiteral => total,
                };
                let ste = if ste_pass(wv) { alpha * through } else { F::zero() };
                coupling * sign(wv) + ste
            })
            .collect();
        Tensor::new(w.shape().to_vec(), data).expect("same shape")
    };
    Ok((grad(g1, &pair.w1), grad(g2, &pair.w2)))
}

#[inline]
pub fn ternarize_value<F: Float>(x: F) -> F {
    if x.abs() > F::from_f64(ACTIVATION_THRESHOLD) {
        sign(x)
    } else {
        F::zero()
    }
}

/// Activations with entries in `{-1, 0, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryActivation<F> {
    pub xt: Tensor<F>,
}

impl<F: Float> TernaryActivation<F> {
    pub fn trits(&self) -> Vec<i8> {
        self.xt.data().iter().map(|v| v.as_f64() as i8).collect()
    }
}

pub fn ternarize_activation<F: Float>(x: &Tensor<F>) -> Result<TernaryActivation<F>> {
    if !x.all_finite() {
        return Err(Error::NonFinite("ternarize_activation".into()));
    }
    Ok(TernaryActivation {
        xt: x.map(ternarize_value),
    })
}

/// Straight-through backward of [`ternarize_activation`].
pub fn ternarize_backward<F: Float>(x: &Tensor<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    upstream.zip_map(x, |g, v| if ste_pass(v) { g } else { F::zero() })
}

/// Threshold selection for the hard-threshold baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwnMode {
    /// `delta = 0.7 * mean(|w|)`.
    Heuristic,
    /// `delta` maximising `(sum_{|w|>delta} |w|)^2 / |{|w|>delta}|`.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwnResult<F> {
    pub t: Vec<i8>,
    pub alpha: F,
    pub delta: F,
}

fn threshold_ternarize<F: Float>(w: &[F], delta: F) -> (Vec<i8>, F) {
    let mut sum = F::zero();
    let mut count = 0usize;
    let t = w
        .iter()
        .map(|&v| {
            if v > delta {
                sum += v.abs();
                count += 1;
                1
            } else if v < -delta {
                sum += v.abs();
                count += 1;
                -1
            } else {
                0
            }
        })
        .collect();
    let alpha = if count == 0 {
        F::zero()
    } else {
        sum / F::from_usize(count)
    };
    (t, alpha)
}

/// Magnitudes sorted descending; ties keep index order.
fn ranked_magnitudes<F: Float>(w: &[F]) -> Vec<(usize, F)> {
    let mut ranked: Vec<(usize, F)> = w.iter().map(|v| v.abs()).enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite weights").then(a.0.cmp(&b.0)));
    ranked
}

pub fn twn_quantize<F: Float>(w: &[F], mode: TwnMode) -> Result<TwnResult<F>> {
    if w.is_empty() {
        return Err(Error::invalid("twn_quantize", "empty kernel"));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("twn_quantize".into()));
    }
    let delta = match mode {
        TwnMode::Heuristic => {
            let mean = w.iter().map(|v| v.abs()).sum::<F>() / F::from_usize(w.len());
            F::from_f64(TWN_DELTA_FACTOR) * mean
        }
        TwnMode::Exact => {
            // A threshold can only separate distinct magnitudes, so k ranges
            // over the ends of runs of equal |w|.
            let ranked = ranked_magnitudes(w);
            let mut best = (F::zero(), 0usize);
            let mut prefix = F::zero();
            for k in 1..=ranked.len() {
                prefix += ranked[k - 1].1;
                if k < ranked.len() && ranked[k].1 == ranked[k - 1].1 {
                    continue;
                }
                let obj = prefix * prefix / F::from_usize(k);
                if obj > best.0 {
                    best = (obj, k);
                }
            }
            match best.1 {
                0 => F::zero(),
                k if k == ranked.len() => ranked[k - 1].1 / F::from_f64(2.0),
                k => (ranked[k - 1].1 + ranked[k].1) / F::from_f64(2.0),
            }
        }
    };
    let (t, alpha) = threshold_ternarize(w, delta);
    Ok(TwnResult { t, alpha, delta })
}

/// Global optimum of `min_{alpha >= 0, t} |w - alpha t|^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult<F> {
    pub t: Vec<i8>,
    pub alpha: F,
    /// `(w·t)^2 / (t·t)`, the amount by which `|w|^2` is reduced.
    pub objective: F,
    /// Number of nonzeros in `t`.
    pub k: usize,
}

/// Exact ternary approximation in `O(N log N)`: the best support of size `k`
/// is always the `k` largest magnitudes, so sort once and scan `k`.
pub fn optimal_ternary_oracle<F: Float>(w: &[F]) -> Result<OracleResult<F>> {
    if w.is_empty() {
        return Err(Error::invalid("optimal_ternary_oracle", "empty kernel"));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("optimal_ternary_oracle".into()));
    }
    let ranked = ranked_magnitudes(w);
    let mut best = (F::zero(), 0usize, F::zero());
    let mut prefix = F::zero();
    for (k, &(_, m)) in ranked.iter().enumerate() {
        prefix += m;
        let kk = F::from_usize(k + 1);
        let obj = prefix * prefix / kk;
        if obj > best.0 {
            best = (obj, k + 1, prefix / kk);
        }
    }
    let (objective, k, alpha) = best;
    let mut t = vec![0i8; w.len()];
    for &(i, _) in &ranked[..k] {
        t[i] = sign_i8(w[i]);
    }
    Ok(OracleResult {
        t,
        alpha,
        objective,
        k,
    })
}

/// `(w·t)^2 / (t·t)` for a given pattern, with the optimal nonnegative
/// scale implied (`0` when `w·t <= 0` or `t = 0`).
pub fn ternary_objective<F: Float>(w: &[F], t: &[i8]) -> F {
    let mut dot = F::zero();
    let mut nnz = 0usize;
    for (&v, &s) in w.iter().zip(t) {
        match s {
            1 => dot += v,
            -1 => dot -= v,
            _ => continue,
        }
        nnz += 1;
    }
    if nnz == 0 || dot <= F::zero() {
        F::zero()
    } else {
        dot * dot / F::from_usize(nnz)
    }
}

/// `|w - alpha t|^2` summed over elements.
pub fn approx_error<F: Float>(w: &[F], alpha: F, t: &[i8]) -> Result<F> {
    if w.len() != t.len() {
        return Err(Error::shape(
            "approx_error",
            format!("{} weights vs {} ternary entries", w.len(), t.len()),
        ));
    }
    Ok(w
        .iter()
        .zip(t)
        .map(|(&v, &s)| {
            let d = v - alpha * F::from_f64(s as f64);
            d * d
        })
        .sum())
}
