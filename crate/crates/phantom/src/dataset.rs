use hesam_core::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channels::{make_channels, Sample, CHANNEL_MODES};
use crate::generate::{generate_phantom, Label, PhantomSpec};

/// Malignant share of the reference cohort (510 of 1145 nodules).
pub const MALIGNANT_FRACTION: f64 = 510.0 / 1145.0;
pub const DEFAULT_TRAIN: usize = 916;
pub const DEFAULT_TEST: usize = 229;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub malignant_fraction: f64,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_train: DEFAULT_TRAIN,
            n_test: DEFAULT_TEST,
            malignant_fraction: MALIGNANT_FRACTION,
            channels: 11,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !CHANNEL_MODES.contains(&self.channels) {
            return Err(Error::Config(format!("channel mode {} not in {CHANNEL_MODES:?}", self.channels)));
        }
        if !(0.0..=1.0).contains(&self.malignant_fraction) {
            return Err(Error::Config(format!("malignant fraction {} outside [0, 1]", self.malignant_fraction)));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise std {} must be non-negative", self.noise_std)));
        }
        Ok(())
    }
}

/// Number of malignant samples in a set of `n`.
pub fn malignant_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

/// Labels of a set with exactly [`malignant_count`] malignant entries, in a
/// seeded order.
pub fn balanced_labels(n: usize, fraction: f64, seed: u64) -> Vec<Label> {
    let m = malignant_count(n, fraction);
    let mut labels: Vec<Label> = (0..n).map(|i| if i < m { Label::Malignant } else { Label::Benign }).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels
}

/// Per-sample seed: the master seed xor the sample's global index.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    master ^ index as u64
}

/// Renders samples `offset..offset + labels.len()` of the global index space.
pub fn generate_samples(labels: &[Label], offset: usize, cfg: &GenerationConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let spec = PhantomSpec::sample(label, cfg.noise_std, sample_seed(cfg.seed, offset + i));
            let volume = generate_phantom(&spec)?;
            make_channels(&volume, label, cfg.channels, spec.diameter)
        })
        .collect()
}

/// Train and test sets. Test samples continue the global index after the
/// training samples, so the two never share a seed.
pub fn generate_split(cfg: &GenerationConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let train_labels = balanced_labels(cfg.n_train, cfg.malignant_fraction, cfg.seed.rotate_left(17));
    let test_labels = balanced_labels(cfg.n_test, cfg.malignant_fraction, cfg.seed.rotate_left(31));
    let train = generate_samples(&train_labels, 0, cfg)?;
    let test = generate_samples(&test_labels, cfg.n_train, cfg)?;
    Ok((train, test))
}

/// Stacks `indices` into an `[N, C, H, W]` batch plus class indices.
pub fn stack_batch(samples: &[Sample], indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = match indices.first() {
        Some(&i) if i < samples.len() => samples[i].volume.shape().to_vec(),
        Some(&i) => return Err(Error::Usage(format!("sample index {i} out of {}", samples.len()))),
        None => return Err(Error::Usage("empty batch".into())),
    };
    let mut data = Vec::with_capacity(indices.len() * first.iter().product::<usize>());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Usage(format!("sample index {i} out of {}", samples.len())))?;
        if s.volume.shape() != first.as_slice() {
            return Err(Error::Dimension {
                op: "stack_batch",
                detail: format!("sample {i} has shape {:?}, expected {first:?}", s.volume.shape()),
            });
        }
        data.extend_from_slice(s.volume.data());
        labels.push(s.label.index());
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&first);
    Ok((Tensor::new(&shape, data)?, labels))
}

pub fn labels_of(samples: &[Sample]) -> Vec<Label> {
    samples.iter().map(|s| s.label).collect()
}
