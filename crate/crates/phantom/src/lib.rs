//! Synthetic nodule data: phantom volumes with benign or spiculated
//! morphology, the 1/3/11/21-channel inputs built from them, NODV1 files and
//! stratified cross-validation folds.

pub mod channels;
pub mod dataset;
pub mod format;
pub mod generate;
pub mod split;

pub use channels::{make_channels, Sample, SampleMeta, CHANNEL_MODES};
pub use dataset::{generate_split, stack_batch, GenerationConfig};
pub use format::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use generate::{generate_phantom, Label, PhantomSpec};
pub use split::{kfold_split, DatasetSplit};
