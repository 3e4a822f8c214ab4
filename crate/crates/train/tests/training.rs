use hesam_core::saliency::sam_map;
use hesam_core::{Model, ModelConfig};
use hesam_phantom::{generate_split, stack_batch, GenerationConfig, Sample};
use hesam_train::ablation::{grid_cells, run_ablation_grid, Datasets, Grid, GridSettings};
use hesam_train::cv::fresh_run;
use hesam_train::{cross_validate, evaluate, train, TrainConfig, TrainError};

fn data(channels: usize, n_train: usize, n_test: usize, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    generate_split(&GenerationConfig {
        n_train,
        n_test,
        channels,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn quick(epochs: usize, batch: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        epochs,
        seed,
        ..Default::default()
    };
    c.sgd.batch_size = batch;
    c
}

#[test]
fn one_epoch_on_two_identical_samples_beats_uniform_loss() {
    let (train_set, _) = data(11, 1, 1, 5);
    let pair = vec![train_set[0].clone(), train_set[0].clone()];
    let mut model = Model::<f32>::build(ModelConfig::hesam(11), 1).unwrap();
    let record = train(&mut model, &pair, Some(&pair), &quick(1, 2, 1), |_| {}).unwrap();
    let after = record.metrics.unwrap().loss;
    assert!(after < std::f64::consts::LN_2, "loss {after}");
}

#[test]
fn identical_seeds_give_identical_records() {
    let (tr, te) = data(11, 8, 4, 9);
    let cfg = quick(2, 4, 77);
    let a = fresh_run(&ModelConfig::hesam(11), &tr, &te, &cfg, 77, |_| {}).unwrap();
    let b = fresh_run(&ModelConfig::hesam(11), &tr, &te, &cfg, 77, |_| {}).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    let c = fresh_run(&ModelConfig::hesam(11), &tr, &te, &cfg, 78, |_| {}).unwrap();
    assert_ne!(a.without_timing(), c.without_timing());
}

#[test]
fn record_contents_and_epoch_lines() {
    let (tr, te) = data(1, 6, 3, 2);
    let mut seen = Vec::new();
    let mut cfg = quick(3, 4, 4);
    cfg.eval_every = 2;
    let r = fresh_run(&ModelConfig::hesam(1), &tr, &te, &cfg, 4, |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(r.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(r.epochs[0].test_accuracy.is_none());
    assert!(r.epochs[1].test_accuracy.is_some());
    assert!(r.epochs[2].test_accuracy.is_some());
    assert_eq!((r.train_size, r.test_size), (6, 3));
    let m = r.metrics.as_ref().unwrap();
    assert_eq!(m.probabilities.len(), 3);
    let lines = r.epoch_lines().unwrap();
    assert_eq!(lines.len(), 3);
    let v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    assert_eq!(v["epoch"], 1);
    assert_eq!(v["seed"], 4);
    let back: hesam_train::RunRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn lr_schedule_is_non_increasing() {
    let cfg = TrainConfig::default();
    let lrs: Vec<f64> = (0..120).map(|e| cfg.sgd.lr_at(e)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(lrs[0], 0.0005);
}

#[test]
fn channel_mismatch_is_rejected() {
    let (tr, te) = data(3, 2, 1, 1);
    let mut model = Model::<f32>::build(ModelConfig::hesam(11), 1).unwrap();
    let err = train(&mut model, &tr, Some(&te), &quick(1, 2, 1), |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::ChannelMismatch { data: 3, model: 11 }));
    assert!(matches!(
        evaluate(&model, &te, 4),
        Err(TrainError::ChannelMismatch { .. })
    ));
}

#[test]
fn empty_sets_are_rejected() {
    let mut model = Model::<f32>::build(ModelConfig::hesam(1), 1).unwrap();
    assert!(matches!(evaluate(&model, &[], 4), Err(TrainError::Empty(_))));
    assert!(matches!(
        train(&mut model, &[], None, &quick(1, 2, 1), |_| {}),
        Err(TrainError::Empty(_))
    ));
}

#[test]
fn sam_and_zeroed_hesam_train_identically() {
    let (tr, te) = data(1, 6, 3, 12);
    let cfg = quick(2, 3, 21);
    let mut hesam_cfg = ModelConfig::hesam(1);
    hesam_cfg.zero_high_level = true;
    let mut sam = Model::<f32>::build(ModelConfig::sam(1), 21).unwrap();
    let mut hesam = Model::<f32>::build(hesam_cfg, 21).unwrap();
    let a = train(&mut sam, &tr, Some(&te), &cfg, |_| {}).unwrap().without_timing();
    let b = train(&mut hesam, &tr, Some(&te), &cfg, |_| {}).unwrap().without_timing();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.metrics, b.metrics);
    let (x, _) = stack_batch(&te, &[0, 1, 2]).unwrap();
    for class in 0..2 {
        let ma = sam_map(&sam, &x, class).unwrap();
        let mb = sam_map(&hesam, &x, class).unwrap();
        for (p, q) in ma.iter().zip(&mb) {
            assert_eq!(p.raw, q.raw);
            assert_eq!(p.upsampled, q.upsampled);
        }
    }
}

#[test]
fn cross_validation_is_reproducible() {
    let (tr, _) = data(1, 10, 1, 3);
    let cfg = quick(1, 4, 8);
    let a = cross_validate(&ModelConfig::hesam(1), &tr, 5, &cfg, |_, _| {}).unwrap();
    let b = cross_validate(&ModelConfig::hesam(1), &tr, 5, &cfg, |_, _| {}).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a.iter().map(|r| r.fold).collect::<Vec<_>>(), (0..5).map(Some).collect::<Vec<_>>());
    assert!(a.iter().all(|r| r.test_size == 2 && r.train_size == 8));
    let strip = |v: &[hesam_train::RunRecord]| v.iter().map(|r| r.without_timing()).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn grid_shapes() {
    let names = |g, ch: &[usize]| grid_cells(g, ch).into_iter().map(|c| c.name).collect::<Vec<_>>();
    assert_eq!(names(Grid::Table3, &[11]), ["GAP / GAP", "GAP / GMP", "GMP / GMP", "GMP / GAP"]);
    assert_eq!(names(Grid::Table4, &[11]), ["U+SAM", "U+RB+SAM", "U+GMP+SAM", "U+GMP+RB+SAM"]);
    assert_eq!(grid_cells(Grid::Table4, &[1, 3, 11, 21]).len(), 16);
    assert_eq!(names(Grid::Fusion, &[11]), ["sum", "concat"]);
    assert_eq!(names(Grid::Channels, &[1, 3, 11, 21]), ["D1C", "D3C", "D11C", "D21C"]);
    for g in [Grid::Table3, Grid::Table4, Grid::Fusion, Grid::Channels] {
        for c in grid_cells(g, &[1, 3, 11, 21]) {
            c.config.validate().unwrap();
        }
        assert_eq!(g.to_string().parse::<Grid>().unwrap(), g);
    }
    assert!("table9".parse::<Grid>().is_err());
}

#[test]
fn feature_cells_without_residual_stack_give_logits() {
    let (_, te) = data(11, 1, 2, 4);
    let (x, _) = stack_batch(&te, &[0, 1]).unwrap();
    for cell in grid_cells(Grid::Table4, &[11]) {
        let model = Model::<f32>::build(cell.config.clone(), 3).unwrap();
        let logits = model.predict_logits(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 2], "{}", cell.name);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn grid_run_skips_invalid_cells_and_ignores_jobs() {
    let mut data_sets = Datasets::new();
    data_sets.insert(1, data(1, 4, 2, 6));
    let mut cells = grid_cells(Grid::Fusion, &[1]);
    let mut broken = cells[0].clone();
    broken.name = "broken".into();
    broken.config.use_hf_branch = false;
    cells.push(broken);
    let mut settings = GridSettings {
        train: quick(1, 4, 10),
        ..Default::default()
    };
    let one = run_ablation_grid(&cells, &data_sets, &settings).unwrap();
    settings.jobs = 2;
    let two = run_ablation_grid(&cells, &data_sets, &settings).unwrap();
    assert_eq!(one.cells.len(), 2);
    assert_eq!(one.skipped.len(), 1);
    assert_eq!(one.skipped[0].name, "broken");
    for (p, q) in one.cells.iter().zip(&two.cells) {
        assert_eq!(p.summary, q.summary);
    }
    let jsonl = one.to_jsonl().unwrap();
    assert_eq!(jsonl.lines().count(), 3);
    for line in jsonl.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(one.summary().contains("cell=\"sum\" dataset=D1C runs=1"));
}
