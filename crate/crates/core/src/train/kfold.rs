use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validation index sets of a k-fold partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// `(train, validation)` indices for fold `i`, each sorted ascending.
    pub fn train_val(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let mut val = self.folds[i].clone();
        val.sort_unstable();
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        (train, val)
    }
}

/// Seeded shuffle of `0..n` cut into `k` contiguous folds. The first `n % k`
/// folds receive one extra index.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!(
            "cannot split {n} samples into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(FoldSplit { folds })
}

/// Seeded hold-out split of `0..n`: `round(n * val_fraction)` indices go to
/// validation, at least one and at most `n - 1`. A fraction of 0 validates
/// on the training indices themselves. Both lists are sorted.
pub fn holdout_split(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    if n == 0 {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if val_fraction == 0.0 {
        let all: Vec<usize> = (0..n).collect();
        return Ok((all.clone(), all));
    }
    if n < 2 {
        return Err(Error::Config(
            "a hold-out split needs at least 2 samples".into(),
        ));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}
