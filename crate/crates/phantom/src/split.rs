use hesam_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::generate::Label;

/// `k` disjoint folds covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub folds: Vec<Vec<usize>>,
}

impl DatasetSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test_indices(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every index outside `fold`, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Stratified `k`-fold split.
///
/// Each class is shuffled with `seed` and dealt round-robin, the dealer
/// carrying on from one class to the next, so fold sizes differ by at most
/// one and each fold's class counts are within one of the even share.
pub fn kfold_split(labels: &[Label], k: usize, seed: u64) -> Result<DatasetSplit> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k}, need at least 2 folds")));
    }
    if labels.len() < k {
        return Err(Error::Config(format!("{} samples cannot fill {k} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [Label::Benign, Label::Malignant] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(DatasetSplit { folds })
}
