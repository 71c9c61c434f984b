use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Assignment of whole sequences to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Indices into `dataset.sequences` of the training and test parts of
    /// one fold, each in dataset order.
    pub fn split(&self, dataset: &Dataset, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, seq) in dataset.sequences.iter().enumerate() {
            match self.fold_of(&seq.id) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {
                    return Err(Error::Missing(format!(
                        "sequence {} is not in the fold plan",
                        seq.id
                    )))
                }
            }
        }
        Ok((train, test))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle of the sequences followed by round-robin assignment.
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > dataset.len() {
        return Err(Error::Config(format!(
            "fold count {k} must be in 2..={}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignments = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| (dataset.sequences[i].id.clone(), pos % k))
        .collect();
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}
