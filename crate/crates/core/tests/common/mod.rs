#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sttn::autograd::{Graph, Var};
use sttn::{Result, Tensor};

/// Output spatial extent of a cross-correlation.
pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Direct seven-loop cross-correlation of one `[c, h, w]` image with an
/// `[o, c, kh, kw]` kernel; out-of-range taps read zero.
pub fn naive_conv<T>(x: &[T], [c, h, w]: [usize; 3], k: &[T], [o, kc, kh, kw]: [usize; 4], stride: usize, pad: usize) -> Vec<T>
where
    T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<Output = T>,
{
    assert_eq!(c, kc);
    let (oh, ow) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad));
    let mut out = vec![T::default(); o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::default();
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(ci * h + iy as usize) * w + ix as usize];
                            acc = acc + xv * k[((oc * c + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn random_trits(n: usize, rng: &mut ChaCha8Rng) -> Vec<i8> {
    (0..n).map(|_| rng.random_range(-1i8..=1)).collect()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Mixed relative error with a floor so that near-zero gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Largest `rel_err` between the tape gradient and central differences of
/// `sum(build(inputs) * probe)` over every input element.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    probe_seed: u64,
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    use rand::SeedableRng;
    let loss = |inputs: &[Tensor<f64>], track: bool| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let y = build(&mut g, &vars).expect("forward");
        let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
        let r = uniform(g.shape(y), -1.0, 1.0, &mut rng);
        let r = g.constant(r);
        let p = g.mul(y, r).unwrap();
        let l = g.sum(p).unwrap();
        (g, vars, l)
    };
    let (g, vars, l) = loss(inputs, true);
    let grads = g.backward(l).expect("backward");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient").data().to_vec();
        for j in 0..t.len() {
            let at = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += delta;
                let (g, _, l) = loss(&moved, false);
                g.value(l).data()[0]
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}
