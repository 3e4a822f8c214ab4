//! Training, evaluation and significance testing for the nodule classifier.

pub mod ablation;
pub mod cv;
mod error;
pub mod metrics;
pub mod train;
pub mod wilcoxon;

pub use ablation::{grid_cells, run_ablation_grid, Grid, GridReport, GridSettings};
pub use cv::{cross_validate, summarize};
pub use error::{Result, TrainError};
pub use metrics::{Confusion, Metrics};
pub use train::{evaluate, train, EpochLog, RunRecord, TrainConfig};
pub use wilcoxon::{wilcoxon_signed_rank, Alternative, WilcoxonResult};
