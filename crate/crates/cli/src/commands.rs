use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hesam_core::gradcheck::{check_model, check_ops};
use hesam_core::model::{read_model, write_model};
use hesam_core::nn::checkpoint::Checkpoint;
use hesam_core::saliency::{attention_maps, centre_slice, composite, map_file_name, write_pgm};
use hesam_core::{Model, ModelConfig};
use hesam_phantom::{generate_split, load_dataset, save_dataset, stack_batch, GenerationConfig, Sample, CHANNEL_MODES};
use hesam_train::ablation::{dataset_name, grid_cells, run_ablation_grid, Datasets, Grid, GridSettings};
use hesam_train::cv::{cross_validate, summarize};
use hesam_train::{evaluate, wilcoxon_signed_rank, Alternative};

use crate::exit::{UsageError, VerificationFailed};
use crate::{AblateArgs, AltArg, EvalArgs, GradcheckArgs, GridArg, MapArgs, PhantomArgs, StatsArgs, TrainArgs};

fn load(path: &Path) -> Result<Vec<Sample>> {
    let set = load_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    if set.is_empty() {
        bail!(hesam_train::TrainError::Empty("dataset"));
    }
    Ok(set)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_model(BufReader::new(file)).with_context(|| format!("reading model {}", path.display()))
}

pub fn phantom(a: &PhantomArgs) -> Result<()> {
    println!("seed={}", a.seed);
    let cfg = GenerationConfig {
        n_train: a.n_train,
        n_test: a.n_test,
        channels: a.channels,
        noise_std: a.noise,
        seed: a.seed,
        ..Default::default()
    };
    let (train, test) = generate_split(&cfg)?;
    create_dir(&a.out)?;
    for (name, set) in [("train.nodv", &train), ("test.nodv", &test)] {
        let path = a.out.join(name);
        save_dataset(set, &path).with_context(|| format!("writing {}", path.display()))?;
        let malignant = set.iter().filter(|s| s.label.index() == 1).count();
        println!(
            "wrote {} count={} channels={} malignant={malignant}",
            path.display(),
            set.len(),
            a.channels
        );
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    println!("seed={}", a.seed);
    let train_set = load(&a.train)?;
    let test_set = a.test.as_deref().map(load).transpose()?;
    let config = a.model.config(train_set[0].channels());
    config.validate()?;
    let cfg = a.optim.config(a.seed);
    println!("model {}", serde_json::to_string(&config)?);
    create_dir(&a.out)?;

    let mut epoch_lines = Vec::new();
    let log = |fold: Option<usize>, e: &hesam_train::EpochLog| {
        let mut v = serde_json::to_value(e).expect("epoch log serializes");
        v["fold"] = fold.into();
        let line = v.to_string();
        println!("epoch {line}");
        line
    };

    let records = match a.folds {
        Some(k) => {
            let pooled: Vec<Sample> = train_set.iter().chain(test_set.iter().flatten()).cloned().collect();
            cross_validate(&config, &pooled, k, &cfg, |f, e| epoch_lines.push(log(Some(f), e)))?
        }
        None => {
            let mut model = Model::<f32>::build(config.clone(), a.seed)?;
            let record = hesam_train::train(&mut model, &train_set, test_set.as_deref(), &cfg, |e| {
                epoch_lines.push(log(None, e))
            })?;
            write_file(&a.out.join("model.hsmd"), |w| Ok(write_model(&model, w)?))?;
            write_file(&a.out.join("checkpoint.nack"), |w| {
                Ok(Checkpoint::from_params(model.params()).write(w)?)
            })?;
            vec![record]
        }
    };

    write_file(&a.out.join("epochs.jsonl"), |w| {
        for l in &epoch_lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    write_file(&a.out.join("record.json"), |w| Ok(serde_json::to_writer_pretty(w, &records)?))?;
    for r in &records {
        if let Some(m) = &r.metrics {
            let fold = r.fold.map_or(String::new(), |f| format!("fold={f} "));
            println!("{fold}{}", m.summary());
        }
    }
    if records.len() > 1 {
        let s = summarize(&records);
        println!(
            "folds={} accuracy_mean={:.6} accuracy_std={:.6} sensitivity_mean={:.6} specificity_mean={:.6}",
            s.runs, s.accuracy.mean, s.accuracy.std, s.sensitivity.mean, s.specificity.mean
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let set = load(&a.data)?;
    println!("model {}", serde_json::to_string(model.config())?);
    let m = evaluate(&model, &set, a.batch)?;
    println!("{}", m.summary());
    if let Some(path) = &a.probs_out {
        write_file(path, |w| {
            for p in &m.probabilities {
                writeln!(w, "{p}")?;
            }
            Ok(())
        })?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn map(a: &MapArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let set = load(&a.data)?;
    println!("model {}", serde_json::to_string(model.config())?);
    let n = a.limit.map_or(set.len(), |l| l.min(set.len()));
    create_dir(&a.out)?;
    let method = a.method.into();
    let idx: Vec<usize> = (0..n).collect();
    let mut written = 0;
    for chunk in idx.chunks(16) {
        let (x, _) = stack_batch(&set, chunk)?;
        let maps = attention_maps(&model, &x, a.class, method)?;
        for (j, (&sample, map)) in chunk.iter().zip(&maps).enumerate() {
            let path = a.out.join(map_file_name(sample, method, a.class));
            let img = if a.composite {
                composite(&centre_slice(&x, j)?, &map.upsampled)?
            } else {
                map.upsampled.clone()
            };
            let (h, w) = (img.shape()[0], img.shape()[1]);
            write_file(&path, |f| Ok(write_pgm(f, w, h, img.data())?))?;
            written += 1;
        }
    }
    println!("wrote {written} maps to {}", a.out.display());
    Ok(())
}

fn grid_of(g: GridArg) -> Grid {
    match g {
        GridArg::Table3 => Grid::Table3,
        GridArg::Table4 => Grid::Table4,
        GridArg::Fusion => Grid::Fusion,
        GridArg::Channels => Grid::Channels,
    }
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    println!("seed={}", a.seed);
    let grid = grid_of(a.grid);
    let channels = match (&a.channels[..], grid) {
        ([], Grid::Channels) => CHANNEL_MODES.to_vec(),
        ([], _) => vec![11],
        (c, _) => c.to_vec(),
    };
    if let Some(c) = channels.iter().find(|c| !CHANNEL_MODES.contains(c)) {
        bail!(UsageError(format!("channel mode {c} not in {CHANNEL_MODES:?}")));
    }
    let mut data = Datasets::new();
    for &c in &channels {
        let pair = match &a.data {
            Some(root) => {
                let dir = root.join(dataset_name(c));
                (load(&dir.join("train.nodv"))?, load(&dir.join("test.nodv"))?)
            }
            None => generate_split(&GenerationConfig {
                n_train: a.n_train,
                n_test: a.n_test,
                channels: c,
                seed: a.seed,
                ..Default::default()
            })?,
        };
        data.insert(c, pair);
    }
    let settings = GridSettings {
        train: a.optim.config(a.seed),
        folds: a.folds,
        repeats: a.repeats,
        jobs: a.jobs,
    };
    let cells = grid_cells(grid, &channels);
    println!("grid={grid} cells={} channels={channels:?}", cells.len());
    let started = Instant::now();
    let report = run_ablation_grid(&cells, &data, &settings)?;
    print!("{}", report.summary());
    println!("elapsed_s={:.1}", started.elapsed().as_secs_f64());
    if let Some(path) = &a.out {
        let text = report.to_jsonl()?;
        write_file(path, |w| Ok(w.write_all(text.as_bytes())?))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    println!("seed={}", a.seed);
    let mut reports = check_ops(a.seed, a.instances, a.eps, a.tol)?;
    if !a.skip_model {
        reports.push(check_model(ModelConfig::hesam(11), a.seed, 4, a.samples, a.eps, a.tol, true)?);
    }
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status} {} probes={} max_rel_err={:.3e} tol={:.0e}",
            r.name, r.probes, r.max_rel_err, r.tolerance
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if !failed.is_empty() {
        bail!(VerificationFailed(format!("gradient check failed for {}", failed.join(", "))));
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .with_context(|| format!("{}: not a number: {t:?}", path.display()))
        })
        .collect()
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let x = read_numbers(&a.a)?;
    let y = read_numbers(&a.b)?;
    let alternative = match a.alternative {
        AltArg::TwoSided => Alternative::TwoSided,
        AltArg::Greater => Alternative::Greater,
        AltArg::Less => Alternative::Less,
    };
    let r = wilcoxon_signed_rank(&x, &y, alternative)?;
    let p = r.p_value.map_or("undefined".to_string(), |p| format!("{p:.6e}"));
    println!(
        "n={} w_plus={} w_minus={} statistic={} p_value={p} method={:?} alternative={:?}",
        r.n, r.w_plus, r.w_minus, r.statistic, r.method, r.alternative
    );
    Ok(())
}

