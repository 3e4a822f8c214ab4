//! Ablation grids over pooling modes, feature branches, fusion and input
//! channels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use hesam_core::{Fusion, HeadKind, ModelConfig, Pooling};
use hesam_phantom::Sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::{cross_validate, fresh_run, summarize, RunSummary};
use crate::error::{Result, TrainError};
use crate::train::{derive_seed, RunRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// Pooling of the high-level and final features (HF / FCF).
    Table3,
    /// Residual stack and high-level branch on and off.
    Table4,
    /// Sum against concatenation fusion.
    Fusion,
    /// The default model on every requested channel mode.
    Channels,
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Table3 => "table3",
            Grid::Table4 => "table4",
            Grid::Fusion => "fusion",
            Grid::Channels => "channels",
        })
    }
}

impl FromStr for Grid {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Grid::Table3),
            "table4" => Ok(Grid::Table4),
            "fusion" => Ok(Grid::Fusion),
            "channels" => Ok(Grid::Channels),
            other => Err(TrainError::Invalid(format!(
                "unknown grid {other:?} (table3, table4, fusion, channels)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub channels: usize,
    pub config: ModelConfig,
}

pub fn dataset_name(channels: usize) -> String {
    format!("D{channels}C")
}

fn feature_cell_config(channels: usize, residual: bool, high_level: bool) -> ModelConfig {
    let mut c = if high_level {
        ModelConfig::hesam(channels)
    } else {
        ModelConfig::sam(channels)
    };
    c.use_residual_stack = residual;
    c.unet_out_channels = 256;
    c
}

/// Cells of `grid` for each channel mode in `channels`, unvalidated.
pub fn grid_cells(grid: Grid, channels: &[usize]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &ch in channels {
        let mut push = |name: &str, config: ModelConfig| {
            cells.push(Cell {
                name: name.to_string(),
                channels: ch,
                config,
            })
        };
        match grid {
            Grid::Table3 => {
                use Pooling::{Gap, Gmp};
                for (hf, fcf) in [(Gap, Gap), (Gap, Gmp), (Gmp, Gmp), (Gmp, Gap)] {
                    let mut c = ModelConfig::hesam(ch);
                    c.hf_pool = hf;
                    c.fcf_pool = fcf;
                    push(&format!("{} / {}", hf.to_string().to_uppercase(), fcf.to_string().to_uppercase()), c);
                }
            }
            Grid::Table4 => {
                push("U+SAM", feature_cell_config(ch, false, false));
                push("U+RB+SAM", feature_cell_config(ch, true, false));
                push("U+GMP+SAM", feature_cell_config(ch, false, true));
                push("U+GMP+RB+SAM", feature_cell_config(ch, true, true));
            }
            Grid::Fusion => {
                for fusion in [Fusion::Sum, Fusion::Concat] {
                    let mut c = ModelConfig::hesam(ch);
                    c.fusion = fusion;
                    push(&fusion.to_string(), c);
                }
            }
            Grid::Channels => push(&dataset_name(ch), ModelConfig::hesam(ch)),
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub train: TrainConfig,
    /// `Some(k)`: k-fold cross-validation over train and test pooled.
    /// `None`: train on the training set and score the test set.
    pub folds: Option<usize>,
    /// Independent seeds per cell in train/test mode.
    pub repeats: usize,
    /// Cells run concurrently on this many threads.
    pub jobs: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            folds: None,
            repeats: 1,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub name: String,
    pub dataset: String,
    pub label: String,
    pub summary: RunSummary,
    pub records: Vec<RunRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub name: String,
    pub dataset: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<CellReport>,
    pub skipped: Vec<SkippedCell>,
}

/// Train/test sets keyed by channel mode.
pub type Datasets = BTreeMap<usize, (Vec<Sample>, Vec<Sample>)>;

fn run_cell(cell: &Cell, data: &Datasets, settings: &GridSettings) -> Result<CellReport> {
    let (train_set, test_set) = data
        .get(&cell.channels)
        .ok_or_else(|| TrainError::Invalid(format!("no dataset for {} channels", cell.channels)))?;
    let master = settings.train.seed;
    let records = match settings.folds {
        Some(k) => {
            let pooled: Vec<Sample> = train_set.iter().chain(test_set).cloned().collect();
            cross_validate(&cell.config, &pooled, k, &settings.train, |_, _| {})?
        }
        None => (0..settings.repeats.max(1))
            .map(|r| {
                let seed = derive_seed(master, r as u64 + 1);
                fresh_run(&cell.config, train_set, test_set, &settings.train, seed, |_| {})
            })
            .collect::<Result<_>>()?,
    };
    Ok(CellReport {
        name: cell.name.clone(),
        dataset: dataset_name(cell.channels),
        label: cell.config.label(),
        summary: summarize(&records),
        records,
    })
}

/// Trains every valid cell; cells whose configuration is invalid are listed
/// in `skipped` with the reason.
///
/// All cells share the run seeds derived from the master seed, so results
/// do not depend on cell order or on `jobs`.
pub fn run_ablation_grid(cells: &[Cell], data: &Datasets, settings: &GridSettings) -> Result<GridReport> {
    settings.train.validate()?;
    let mut valid = Vec::new();
    let mut skipped = Vec::new();
    for cell in cells {
        match cell.config.validate() {
            Ok(()) => valid.push(cell),
            Err(e) => skipped.push(SkippedCell {
                name: cell.name.clone(),
                dataset: dataset_name(cell.channels),
                reason: e.to_string(),
            }),
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs.max(1))
        .build()
        .map_err(|e| TrainError::Invalid(e.to_string()))?;
    let reports: Vec<Result<CellReport>> =
        pool.install(|| valid.par_iter().map(|c| run_cell(c, data, settings)).collect());
    Ok(GridReport {
        cells: reports.into_iter().collect::<Result<_>>()?,
        skipped,
    })
}

impl GridReport {
    /// One JSON object per cell (without per-run records), then one per
    /// skipped cell.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cells {
            let line = serde_json::json!({
                "cell": c.name,
                "dataset": c.dataset,
                "label": c.label,
                "runs": c.summary.runs,
                "accuracy": c.summary.accuracy,
                "sensitivity": c.summary.sensitivity,
                "specificity": c.summary.specificity,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        for s in &self.skipped {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// `key=value` lines, one per cell.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            let s = &c.summary;
            out.push_str(&format!(
                "cell=\"{}\" dataset={} runs={} accuracy_mean={:.6} accuracy_std={:.6} \
                 sensitivity_mean={:.6} specificity_mean={:.6}\n",
                c.name, c.dataset, s.runs, s.accuracy.mean, s.accuracy.std, s.sensitivity.mean, s.specificity.mean
            ));
        }
        for s in &self.skipped {
            out.push_str(&format!("cell=\"{}\" dataset={} skipped=\"{}\"\n", s.name, s.dataset, s.reason));
        }
        out
    }
}

/// Head kinds whose maps exist for a cell (concat fusion has none).
pub fn map_capable(cell: &Cell) -> bool {
    cell.config.maps_defined() && cell.config.head != HeadKind::Cam
}
