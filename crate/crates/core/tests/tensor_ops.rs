use hesam_core::gradcheck::{check_ops, DEFAULT_EPS};
use hesam_core::tensor::BnMode;
use hesam_core::{Error, PoolMode, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn conv2d_all_ones_counts_overlap() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 1, 3, 3]);
    assert_eq!(out.data()[4], 9.0);
    assert_eq!(out.data()[0], 4.0);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xv = random(&[2, 1, 5, 4], &mut rng);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let w = tape.constant(t(&[1, 1, 3, 3], k));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y), &xv);
}

#[test]
fn conv2d_output_extent_and_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
    let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 3, 3, 3]);

    let bad = tape.constant(Tensor::zeros(&[3, 4, 3, 3]));
    assert!(matches!(tape.conv2d(x, bad, None, 1, 1), Err(Error::Dimension { .. })));

    let nan = tape.constant(Tensor::full(&[1, 2, 7, 7], f32::NAN));
    assert!(matches!(tape.conv2d(nan, w, None, 1, 1), Err(Error::NonFinite { .. })));
}

#[test]
fn conv_transpose_copies_into_disjoint_blocks() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    let y = tape.conv_transpose2d(x, w, None, 2).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
    #[rustfmt::skip]
    let want = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(out.data(), &want);

    let z = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let y = tape.conv_transpose2d(z, w, None, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

fn inner_product_gap(seed: u64, stride: usize, k: usize, hw: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xv = random(&[2, 3, hw, hw], &mut rng);
    let wv = random(&[4, 3, k, k], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let w = tape.constant(wv.clone());
    let cx = tape.conv2d(x, w, None, stride, 0).unwrap();
    let yv = random(tape.value(cx).shape(), &mut rng);
    let lhs = tape.value(cx).dot(&yv).unwrap();
    let y = tape.constant(yv);
    let ct = tape.conv_transpose2d(y, w, None, stride).unwrap();
    let rhs = xv.dot(tape.value(ct)).unwrap();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for seed in 0..10 {
        assert!(inner_product_gap(seed, 2, 2, 8) < 1e-10);
        assert!(inner_product_gap(seed, 1, 3, 6) < 1e-10);
        assert!(inner_product_gap(seed, 3, 3, 9) < 1e-10);
    }
}

#[test]
fn maxpool_picks_max_and_routes_ties_to_first() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 2.5), true);
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    #[rustfmt::skip]
    let want = [
        1.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        1.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
    ];
    assert_eq!(tape.grad(x).unwrap().data(), &want);

    let mut tape = Tape::<f64>::new();
    let small = tape.constant(Tensor::zeros(&[1, 1, 1, 3]));
    assert!(matches!(tape.maxpool2d(small, 2, 2), Err(Error::Dimension { .. })));
}

#[test]
fn avgpool_geometry_constant_and_gradient_spread() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::full(&[1, 2, 16, 16], 0.75), true);
    let y = tape.avgpool2d(x, 5, 2, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 6, 6]);
    assert!(tape.value(y).data().iter().all(|v| (v - 0.75).abs() < 1e-15));

    // one output window: each covered cell receives 1/25
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros(&[1, 1, 5, 5]), true);
    let y = tape.avgpool2d(x, 5, 2, 0).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| (g - 1.0 / 25.0).abs() < 1e-16));
}

#[test]
fn global_pool_modes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f32>::full(&[1, 256, 4, 4], 3.0));
    for mode in [PoolMode::Avg, PoolMode::Max] {
        let y = tape.global_pool(x, mode).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 256]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
    }

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], vec![0.1, 0.7, -0.2, 0.3]), true);
    let y = tape.global_pool(x, PoolMode::Max).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn dense_identity_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xv = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let eye = tape.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let zero = tape.constant(Tensor::zeros(&[4]));
    let y = tape.dense(x, eye, zero).unwrap();
    assert_eq!(tape.value(y), &xv);

    let xv = random(&[2, 36], &mut rng);
    let x = tape.constant(xv.clone());
    let w = tape.constant(Tensor::full(&[36, 1], 1.0 / 36.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.dense(x, w, b).unwrap();
    for s in 0..2 {
        let mean: f64 = xv.data()[s * 36..(s + 1) * 36].iter().sum::<f64>() / 36.0;
        assert!((tape.value(y).data()[s] - mean).abs() < 1e-14);
    }
}

#[test]
fn relu_concat_and_batchnorm_semantics() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], vec![-1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let a = tape.constant(Tensor::zeros(&[1, 64, 4, 4]));
    let b = tape.constant(Tensor::ones(&[1, 64, 4, 4]));
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 128, 4, 4]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xv = Tensor::from_fn(&[4, 3, 5, 5], |_| rng.random_range(-2.0..5.0));
    let x = tape.constant(xv);
    let g = tape.constant(Tensor::ones(&[3]));
    let bt = tape.constant(Tensor::zeros(&[3]));
    let (y, stats) = tape.batchnorm2d(x, g, bt, BnMode::Train).unwrap();
    assert!(stats.is_some());
    let out = tape.value(y).data();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|s| out[(s * 3 + ch) * 25..(s * 3 + ch + 1) * 25].iter().copied())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn batchnorm_zero_variance_channel_stays_finite() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[2, 1, 3, 3], 4.0));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::full(&[1], 0.5));
    let (y, _) = tape.batchnorm2d(x, g, b, BnMode::Train).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[1, 2], vec![0.0, 0.0]));
    let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let z = tape.constant(t(&[1, 2], vec![20.0, -20.0]));
    let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-15);

    // gradient = (softmax - onehot) / N
    let mut tape = Tape::new();
    let z = tape.leaf(t(&[2, 2], vec![1.0, -1.0, 0.5, 0.5]), true);
    let l = tape.softmax_cross_entropy(z, &[0, 1]).unwrap();
    tape.backward(l).unwrap();
    let p = 1.0 / (1.0 + (-2.0f64).exp());
    let want = [(p - 1.0) / 2.0, (1.0 - p) / 2.0, 0.25, -0.25];
    for (g, w) in tape.grad(z).unwrap().data().iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }
}

#[test]
fn backward_simple_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xv = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(xv.clone(), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(xv.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    for (g, v) in tape.grad(x).unwrap().data().iter().zip(xv.data()) {
        assert_eq!(*g, 2.0 * v);
    }
}

#[test]
fn backward_twice_requires_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::ones(&[2]), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));
    tape.zero_grad();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_on_non_scalar_is_usage_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::ones(&[2]), true);
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn every_op_matches_finite_differences() {
    let reports = check_ops(17, 10, DEFAULT_EPS, 1e-4).unwrap();
    for r in &reports {
        assert!(r.passed(), "{} max rel err {:e}", r.name, r.max_rel_err);
        assert!(r.instances >= 10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_identity_holds_for_random_geometry(
        seed in 0u64..1000,
        stride in 1usize..4,
        k in 1usize..4,
        extra in 0usize..3,
    ) {
        let hw = k + stride * (1 + extra);
        prop_assert!(inner_product_gap(seed, stride, k, hw) < 1e-10);
    }

    #[test]
    fn conv_forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let wv = Tensor::<f32>::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(xv.clone());
            let w = tape.constant(wv.clone());
            let y = tape.conv2d(x, w, None, 1, 1).unwrap();
            tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
