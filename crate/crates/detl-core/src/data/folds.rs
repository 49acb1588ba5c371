//! Stratified k-fold assignment and balanced holdout splits.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};

use super::LabeledDataset;

/// A deterministic assignment of every sample to exactly one fold.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    k: usize,
    assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Fold index of each sample, in dataset order.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Sample indices of fold `fold`, in dataset order.
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sample indices outside fold `fold`, in dataset order.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Assign samples to `k` folds so that per-class fold sizes differ by at
/// most one. Every class must have at least `k` samples.
pub fn stratified_folds(dataset: &LabeledDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::Config("fold count must be positive".into()));
    }
    let counts = dataset.class_counts();
    for (class, &count) in counts.iter().enumerate() {
        if count < k {
            return Err(Error::ClassTooSmall {
                class: dataset.class_names()[class].clone(),
                count,
                required: k,
            });
        }
    }

    let mut assignment = vec![0usize; dataset.len()];
    for class in 0..dataset.class_count() {
        let mut indices: Vec<usize> = dataset
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng_from(seed, &[stream::FOLDS, class as u64]);
        indices.shuffle(&mut rng);
        for (j, idx) in indices.into_iter().enumerate() {
            assignment[idx] = j % k;
        }
    }
    Ok(FoldPlan { k, assignment })
}

/// Randomly sample exactly `per_class` validation samples from every class;
/// the remainder becomes the training set. Both halves preserve dataset
/// order and are disjoint by id.
pub fn balanced_holdout(
    dataset: &LabeledDataset,
    per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let counts = dataset.class_counts();
    for (class, &count) in counts.iter().enumerate() {
        if count < per_class {
            return Err(Error::ClassTooSmall {
                class: dataset.class_names()[class].clone(),
                count,
                required: per_class,
            });
        }
    }

    let mut in_validation = vec![false; dataset.len()];
    for class in 0..dataset.class_count() {
        let mut indices: Vec<usize> = dataset
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng_from(seed, &[stream::HOLDOUT, class as u64]);
        indices.shuffle(&mut rng);
        for &idx in indices.iter().take(per_class) {
            in_validation[idx] = true;
        }
    }

    let val: Vec<usize> = (0..dataset.len()).filter(|&i| in_validation[i]).collect();
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| !in_validation[i]).collect();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}
