use hesam_core::nn::Ctx;
use hesam_core::saliency::{
    bilinear_sample, cam, centre_slice, composite, gradcam, gradcam_weights, map_file_name, normalize_upsample,
    resize_bilinear, sam_map, write_pgm, MapMethod,
};
use hesam_core::{Error, Fusion, Model, ModelConfig, Pooling, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn input(n: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, c, 32, 32], |_| rng.random_range(0.0..1.0))
}

fn features(model: &Model<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (tr, _) = model.run_eval(&mut tape, x, false).unwrap();
    tape.value(tr.final_features).clone()
}

fn plane(g: &Tensor<f64>, n: usize, k: usize) -> &[f64] {
    let (_, c, h, w) = g.dims4("test").unwrap();
    &g.data()[(n * c + k) * h * w..(n * c + k + 1) * h * w]
}

fn set_column(model: &mut Model<f64>, class: usize, f: impl Fn(usize) -> f64) {
    let (w, _) = model.classifier_mut();
    let rows = w.shape()[0];
    for k in 0..rows {
        w.data_mut()[k * 2 + class] = f(k);
    }
}

#[test]
fn cam_single_channel_and_zero_weights() {
    let mut model = Model::<f64>::build(ModelConfig::cam(1), 3).unwrap();
    let x = input(2, 1, 1);
    let g = features(&model, &x);
    set_column(&mut model, 1, |k| if k == 1 { 1.0 } else { 0.0 });
    let maps = cam(&model, &x, 1).unwrap();
    for (n, m) in maps.iter().enumerate() {
        assert_eq!(m.raw.shape(), &[16, 16]);
        assert_eq!(m.upsampled.shape(), &[32, 32]);
        assert_eq!(m.raw.data(), plane(&g, n, 1));
        assert_eq!(m.method, MapMethod::Cam);
    }
    set_column(&mut model, 1, |_| 0.0);
    for m in cam(&model, &x, 1).unwrap() {
        assert!(m.raw.data().iter().all(|&v| v == 0.0));
        assert!(m.upsampled.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cam_matches_loop_oracle() {
    let model = Model::<f64>::build(ModelConfig::cam(3), 4).unwrap();
    let x = input(2, 3, 2);
    let g = features(&model, &x);
    let (w, _) = model.classifier();
    for class in 0..2 {
        for (n, m) in cam(&model, &x, class).unwrap().iter().enumerate() {
            for p in 0..256 {
                let want: f64 = (0..256).map(|k| w.data()[k * 2 + class] * plane(&g, n, k)[p]).sum();
                assert!((want - m.raw.data()[p]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn cam_requires_cam_head() {
    let model = Model::<f64>::build(ModelConfig::sam(1), 0).unwrap();
    assert!(matches!(cam(&model, &input(1, 1, 0), 0), Err(Error::Usage(_))));
    let model = Model::<f64>::build(ModelConfig::cam(1), 0).unwrap();
    assert!(sam_map(&model, &input(1, 1, 0), 0).is_err());
    assert!(cam(&model, &input(1, 1, 0), 2).is_err());
}

#[test]
fn gradcam_on_cam_head_is_scaled_relu_of_cam() {
    let model = Model::<f64>::build(ModelConfig::cam(1), 5).unwrap();
    let x = input(2, 1, 3);
    let (alpha, _) = gradcam_weights(&model, &x, 0).unwrap();
    let (w, _) = model.classifier();
    for n in 0..2 {
        for k in 0..256 {
            assert!((alpha.data()[n * 256 + k] - w.data()[k * 2] / 256.0).abs() < 1e-12);
        }
    }
    let cams = cam(&model, &x, 0).unwrap();
    let grads = gradcam(&model, &x, 0).unwrap();
    for (c, g) in cams.iter().zip(&grads) {
        assert!(g.raw.data().iter().all(|&v| v >= 0.0));
        for (a, b) in c.raw.data().iter().zip(g.raw.data()) {
            assert!((a.max(0.0) / 256.0 - b).abs() < 1e-12);
        }
    }

    // With a non-negative column the cam map is already non-negative and the
    // two normalized maps coincide.
    let mut model = model;
    set_column(&mut model, 0, |k| (k % 7) as f64 * 0.01);
    let c = &cam(&model, &x, 0).unwrap()[0];
    let g = &gradcam(&model, &x, 0).unwrap()[0];
    assert!(c.raw.data().iter().all(|&v| v >= 0.0));
    for (a, b) in c.upsampled.data().iter().zip(g.upsampled.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

/// Logit of `class` for sample 0 computed from given final features.
fn sam_logit(model: &Model<f64>, g: &Tensor<f64>, class: usize) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let mut cx = Ctx::new(&mut tape, model.params(), &bound, false);
    let gv = cx.tape.constant(g.clone());
    let out = model.forward_sam_head(&mut cx, gv).unwrap();
    cx.tape.value(out.logits).data()[class]
}

#[test]
fn gradcam_gradients_match_finite_differences() {
    let mut cfg = ModelConfig::sam(1);
    cfg.fcf_pool = Pooling::Gap;
    let model = Model::<f64>::build(cfg, 9).unwrap();
    let x = input(1, 1, 4);
    let class = 1;

    let mut tape = Tape::new();
    let (tr, _) = model.run_eval(&mut tape, &x, true).unwrap();
    let s = tape.class_score_sum(tr.logits, class).unwrap();
    tape.backward(s).unwrap();
    let g = tape.value(tr.final_features).clone();
    let grad = tape.grad(tr.final_features).unwrap().clone();

    let eps = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..12 {
        let i = rng.random_range(0..g.len());
        let mut p = g.clone();
        p.data_mut()[i] += eps;
        let up = sam_logit(&model, &p, class);
        p.data_mut()[i] -= 2.0 * eps;
        let down = sam_logit(&model, &p, class);
        let fd = (up - down) / (2.0 * eps);
        assert!((fd - grad.data()[i]).abs() <= 1e-3 * fd.abs().max(grad.data()[i].abs()).max(1e-8));
    }

    // alpha_k is the derivative along a uniform shift of map k
    let (alpha, _) = gradcam_weights(&model, &x, class).unwrap();
    for k in [0, 31, 200] {
        let shift = |sign: f64| {
            let mut p = g.clone();
            p.data_mut()[k * 256..(k + 1) * 256].iter_mut().for_each(|v| *v += sign * eps / 256.0);
            sam_logit(&model, &p, class)
        };
        let fd = (shift(1.0) - shift(-1.0)) / (2.0 * eps);
        let a = alpha.data()[k];
        assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-8), "{fd} vs {a}");
    }
}

#[test]
fn gradcam_is_non_negative_for_sam_and_hesam() {
    for cfg in [ModelConfig::sam(1), ModelConfig::hesam(1)] {
        let model = Model::<f64>::build(cfg, 2).unwrap();
        for class in 0..2 {
            for m in gradcam(&model, &input(2, 1, 5), class).unwrap() {
                assert!(m.raw.data().iter().all(|&v| v >= 0.0));
                assert!(m.upsampled.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}

#[test]
fn sam_map_one_hot_and_loop_oracle() {
    let mut model = Model::<f64>::build(ModelConfig::sam(1), 6).unwrap();
    let x = input(2, 1, 6);
    let g = features(&model, &x);
    let (w, _) = model.classifier();
    for (n, m) in sam_map(&model, &x, 0).unwrap().iter().enumerate() {
        assert_eq!(m.method, MapMethod::Sam);
        for p in 0..256 {
            let want: f64 = (0..256).map(|k| w.data()[k * 2] * plane(&g, n, k)[p]).sum();
            assert!((want - m.raw.data()[p]).abs() < 1e-6);
        }
    }
    set_column(&mut model, 1, |k| if k == 17 { 1.0 } else { 0.0 });
    for (n, m) in sam_map(&model, &x, 1).unwrap().iter().enumerate() {
        assert_eq!(m.raw.data(), plane(&g, n, 17));
    }
}

#[test]
fn hesam_maps_use_the_fused_classifier_and_match_sam_when_d_is_zeroed() {
    let sam = Model::<f64>::build(ModelConfig::sam(1), 13).unwrap();
    let mut cfg = ModelConfig::hesam(1);
    cfg.zero_high_level = true;
    let hesam = Model::<f64>::build(cfg, 13).unwrap();
    let x = input(2, 1, 7);
    let a = sam_map(&sam, &x, 1).unwrap();
    let b = sam_map(&hesam, &x, 1).unwrap();
    for (a, b) in a.iter().zip(&b) {
        assert_eq!(b.method, MapMethod::Hesam);
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.upsampled, b.upsampled);
    }
}

#[test]
fn concat_fusion_maps_are_undefined() {
    let mut cfg = ModelConfig::hesam(1);
    cfg.fusion = Fusion::Concat;
    let model = Model::<f64>::build(cfg, 1).unwrap();
    assert!(matches!(sam_map(&model, &input(1, 1, 0), 0), Err(Error::MapUndefined(_))));
}

#[test]
fn maps_are_linear_in_classifier_weights() {
    let base = Model::<f64>::build(ModelConfig::sam(1), 21).unwrap();
    let x = input(1, 1, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w1: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w2: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let raw = |w: &dyn Fn(usize) -> f64| {
        let mut m = base.clone();
        set_column(&mut m, 0, w);
        sam_map(&m, &x, 0).unwrap().remove(0).raw
    };
    let a = raw(&|k| w1[k]);
    let b = raw(&|k| w2[k]);
    let ab = raw(&|k| w1[k] + w2[k]);
    for i in 0..a.len() {
        assert!((a.data()[i] + b.data()[i] - ab.data()[i]).abs() < 1e-6);
    }
}

#[test]
fn positive_scaling_keeps_the_normalized_map() {
    let model = Model::<f64>::build(ModelConfig::sam(1), 22).unwrap();
    let x = input(1, 1, 10);
    let before = sam_map(&model, &x, 1).unwrap().remove(0);
    for s in [0.25, 2.0, 8.0] {
        let mut m = model.clone();
        let (w, _) = m.classifier_mut();
        for k in 0..256 {
            w.data_mut()[k * 2 + 1] *= s;
        }
        let after = sam_map(&m, &x, 1).unwrap().remove(0);
        for (a, b) in before.raw.data().iter().zip(after.raw.data()) {
            assert_eq!(a * s, *b);
        }
        assert_eq!(before.upsampled, after.upsampled);
    }
}

#[test]
fn maps_are_deterministic() {
    let model = Model::<f64>::build(ModelConfig::hesam(3), 30).unwrap();
    let x = input(2, 3, 11);
    assert_eq!(sam_map(&model, &x, 0).unwrap(), sam_map(&model, &x, 0).unwrap());
    assert_eq!(gradcam(&model, &x, 1).unwrap(), gradcam(&model, &x, 1).unwrap());
}

#[test]
fn normalization_rules() {
    let raw = Tensor::from_fn(&[16, 16], |i| (i * 11 / 256) as f64);
    let up = normalize_upsample(&raw, 32, 32);
    let lo = up.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((lo, hi), (0.0, 1.0));

    let flat = Tensor::full(&[16, 16], 3.5);
    assert!(normalize_upsample(&flat, 32, 32).data().iter().all(|&v| v == 0.0));

    let pair = Tensor::new(&[1, 2], vec![2.0, 5.0]).unwrap();
    assert_eq!(bilinear_sample(&pair, 0.0, 0.5), 3.5);
    let col = Tensor::new(&[2, 1], vec![-1.0, 3.0]).unwrap();
    assert_eq!(bilinear_sample(&col, 0.5, 0.0), 1.0);
}

#[test]
fn resize_keeps_constant_maps_and_corners() {
    let c = Tensor::<f64>::full(&[16, 16], 0.4);
    assert!(resize_bilinear(&c, 32, 32).data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    let ramp = Tensor::from_fn(&[16, 16], |i| (i % 16) as f64);
    let up = resize_bilinear(&ramp, 32, 32);
    assert_eq!(up.data()[0], 0.0);
    assert_eq!(up.data()[31], 15.0);
    // half-pixel centres: output column 1 sits a quarter pixel right of input column 0
    assert_eq!(up.data()[1], 0.25);
}

#[test]
fn pgm_export() {
    assert_eq!(map_file_name(7, MapMethod::GradCam, 1), "7_gradcam_1.pgm");
    let mut buf = Vec::new();
    write_pgm(&mut buf, 2, 2, &[0.0f64, 0.5, 1.0, 2.0]).unwrap();
    assert_eq!(&buf[..11], b"P5\n2 2\n255\n");
    assert_eq!(&buf[11..], &[0, 128, 255, 255]);
    assert!(write_pgm(&mut Vec::new(), 3, 2, &[0.0f64; 4]).is_err());

    let x = input(2, 11, 0);
    let slice = centre_slice(&x, 1).unwrap();
    assert_eq!(slice.data(), &x.data()[(11 + 5) * 1024..(11 + 6) * 1024]);
    let both = composite(&slice, &Tensor::full(&[32, 32], 1.0)).unwrap();
    assert_eq!(both.shape(), &[32, 64]);
    assert_eq!(both.data()[63], 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn upsampled_maps_stay_in_unit_range(values in prop::collection::vec(-1e3f64..1e3, 256)) {
        let raw = Tensor::new(&[16, 16], values).unwrap();
        let up = normalize_upsample(&raw, 32, 32);
        prop_assert!(up.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn normalization_ignores_positive_affine_changes(
        values in prop::collection::vec(-10f64..10.0, 256),
        scale in 0.1f64..10.0,
        shift in -5f64..5.0,
    ) {
        let raw = Tensor::new(&[16, 16], values).unwrap();
        let moved = raw.map(|v| v * scale + shift);
        let a = normalize_upsample(&raw, 32, 32);
        let b = normalize_upsample(&moved, 32, 32);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
