mod common;

use common::naive_conv;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sttn::autograd::Graph;
use sttn::infer::{fuse, ternary_conv2d, ternary_conv2d_acc, ternary_dot, BitplaneTensor, PackedKernel, TernaryKernel};
use sttn::quant::{
    approx_error, optimal_ternary_oracle, sign_i8, sttn_quantize_pair, ternarize_activation, ternary_objective,
    twn_quantize, LatentKernelPair, TwnMode,
};
use sttn::train::cosine_lr;
use sttn::Tensor;

fn trits(max: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(-1i8..=1, 1..=max)
}

fn weights(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 1..=max)
}

fn pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| (prop::collection::vec(-2.0f64..2.0, n), prop::collection::vec(-2.0f64..2.0, n)))
}

proptest! {
    #[test]
    fn ternarize_is_odd(x in prop::collection::vec(-3.0f64..3.0, 1..64)) {
        let pos = ternarize_activation(&Tensor::new(vec![x.len()], x.clone()).unwrap()).unwrap().trits();
        let neg_in: Vec<f64> = x.iter().map(|v| -v).collect();
        let neg = ternarize_activation(&Tensor::new(vec![x.len()], neg_in).unwrap()).unwrap().trits();
        // sign(0) = +1 only matters above the threshold, so exact zeros map to 0 both ways.
        prop_assert_eq!(neg, pos.iter().map(|v| -v).collect::<Vec<_>>());
    }

    #[test]
    fn fused_pair_sum_is_ternary_valued((w1, w2) in pair(96)) {
        let n = w1.len();
        let p = LatentKernelPair::new(Tensor::new(vec![n], w1).unwrap(), Tensor::new(vec![n], w2).unwrap()).unwrap();
        let (view, alpha) = sttn_quantize_pair(&p).unwrap();
        let sum = view.w_tilde1().zip_map(&view.w_tilde2(), |a, b| a + b).unwrap();
        for &v in sum.data() {
            prop_assert!(v == alpha + alpha || v == 0.0 || v == -(alpha + alpha));
        }
        let k = fuse(&p).unwrap();
        prop_assert_eq!(k.weights(), sum);
    }

    #[test]
    fn sparsity_conservation((w1, w2) in pair(200)) {
        let n = w1.len();
        let opposite = w1.iter().zip(&w2).filter(|(a, b)| sign_i8(**a) != sign_i8(**b)).count();
        let p = LatentKernelPair::new(
            Tensor::<f32>::from_f64(vec![n], &w1).unwrap(),
            Tensor::from_f64(vec![n], &w2).unwrap(),
        ).unwrap();
        let k = fuse(&p).unwrap();
        let packed = BitplaneTensor::pack(&k.t).unwrap();
        prop_assert_eq!(packed.nonzeros(), n - opposite);
    }

    #[test]
    fn bitplane_round_trip(x in trits(300)) {
        let p = BitplaneTensor::pack(&x).unwrap();
        prop_assert_eq!(p.decode(), x.clone());
        let q = BitplaneTensor::from_words(x.len(), p.mask().to_vec(), p.sign().to_vec()).unwrap();
        prop_assert_eq!(q, p);
    }

    #[test]
    fn ternary_dot_is_exact((a, b) in (1usize..300).prop_flat_map(|n| (prop::collection::vec(-1i8..=1, n), prop::collection::vec(-1i8..=1, n)))) {
        let naive: i64 = a.iter().zip(&b).map(|(&x, &y)| x as i64 * y as i64).sum();
        let got = ternary_dot(&BitplaneTensor::pack(&a).unwrap(), &BitplaneTensor::pack(&b).unwrap()).unwrap();
        prop_assert_eq!(got, naive);
    }

    #[test]
    fn oracle_dominates_heuristic(w in weights(512)) {
        let oracle = optimal_ternary_oracle(&w).unwrap();
        let twn = twn_quantize(&w, TwnMode::Heuristic).unwrap();
        let twn_obj = ternary_objective(&w, &twn.t);
        prop_assert!(oracle.objective >= twn_obj * (1.0 - 1e-12));
        let e_oracle = approx_error(&w, oracle.alpha, &oracle.t).unwrap();
        let e_twn = approx_error(&w, twn.alpha, &twn.t).unwrap();
        prop_assert!(e_oracle <= e_twn + 1e-9 * (1.0 + e_twn));
    }

    #[test]
    fn exact_twn_matches_oracle(w in weights(256)) {
        let oracle = optimal_ternary_oracle(&w).unwrap();
        let exact = twn_quantize(&w, TwnMode::Exact).unwrap();
        let obj = ternary_objective(&w, &exact.t);
        prop_assert!((obj - oracle.objective).abs() <= 1e-9 * (1.0 + oracle.objective));
    }

    #[test]
    fn cosine_is_non_increasing(base in 1e-5f64..1.0, total in 1usize..200) {
        for e in 1..total {
            prop_assert!(cosine_lr(base, e, total) <= cosine_lr(base, e - 1, total));
        }
    }

    #[test]
    fn packed_conv_matches_oracles(
        c in 1usize..4, o in 1usize..4, h in 1usize..8, w in 1usize..8,
        kh in 1usize..4, kw in 1usize..4, stride in 1usize..3, pad in 0usize..3, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= kh && w + 2 * pad >= kw);
        prop_assume!((h + 2 * pad - kh) % stride == 0 && (w + 2 * pad - kw) % stride == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_trits(c * h * w, &mut rng);
        let t = common::random_trits(o * c * kh * kw, &mut rng);
        let kernel = TernaryKernel { t: t.clone(), shape: vec![o, c, kh, kw], scale: 0.375f32 };
        let packed = PackedKernel::new(&kernel).unwrap();
        let bits = BitplaneTensor::pack(&x).unwrap();
        let acc = ternary_conv2d_acc(&bits, [c, h, w], &packed, stride, pad).unwrap();
        let xi: Vec<i64> = x.iter().map(|&v| v as i64).collect();
        let ti: Vec<i64> = t.iter().map(|&v| v as i64).collect();
        let want = naive_conv(&xi, [c, h, w], &ti, [o, c, kh, kw], stride, pad);
        prop_assert_eq!(acc.acc.iter().map(|&v| v as i64).collect::<Vec<_>>(), want);

        let mut g = Graph::<f32>::new();
        let xv = g.constant(Tensor::new(vec![1, c, h, w], x.iter().map(|&v| v as f32).collect()).unwrap());
        let kv = g.constant(kernel.weights());
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        let got = ternary_conv2d(&bits, [c, h, w], &packed, stride, pad).unwrap();
        for (a, b) in got.data().iter().zip(g.value(y).data()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn one_by_one_identity_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = common::uniform(&[2, 3, 4, 5], -5.0, 5.0, &mut rng);
    let mut k = Tensor::<f64>::zeros(vec![3, 3, 1, 1]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k);
    let y = g.conv2d(xv, kv, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn batch_norm_train_normalises_and_eval_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x = common::uniform(&[6, 3, 4, 4], -4.0, 9.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(vec![3]));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let (y, _) = g.batch_norm_train(xv, gamma, beta).unwrap();
        let y = g.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..6).flat_map(|n| y.data()[(n * 3 + c) * 16..][..16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
    // f(a) - f(0) + f(b) - f(0) == f(a + b) - f(0) for an affine map.
    let eval = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::from_f64(vec![2], &[1.5, -0.5]).unwrap());
        let beta = g.constant(Tensor::from_f64(vec![2], &[0.2, 0.1]).unwrap());
        let y = g.batch_norm_eval(xv, gamma, beta, &[0.3, -1.0], &[2.0, 0.25]).unwrap();
        g.value(y).clone()
    };
    let a = common::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = common::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let zero = eval(Tensor::zeros(vec![2, 2, 3, 3]));
    let fa = eval(a.clone());
    let fb = eval(b.clone());
    let fab = eval(a.zip_map(&b, |x, y| x + y).unwrap());
    for i in 0..fab.len() {
        let lhs = fa.data()[i] + fb.data()[i] - zero.data()[i];
        assert!((lhs - fab.data()[i]).abs() < 1e-12);
    }
}
