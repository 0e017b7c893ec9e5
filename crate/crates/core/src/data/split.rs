//! Train/val/test partitioning and nested label-fraction sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default train/val/test proportions.
pub const DEFAULT_RATIOS: [f64; 3] = [0.65, 0.20, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    /// Train ids whose annotations are visible to the learner.
    pub labeled: Vec<u64>,
    /// Train ids used without annotations.
    pub unlabeled: Vec<u64>,
    pub label_fraction: f64,
}

/// Sizes of a `ratios` partition of `n` items.
///
/// Validation and test take `ceil(r * n)` (with a small tolerance so that
/// exact products are not bumped up); train receives the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "bad split ratios {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let part = |r: f64| ((r * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let (val, test) = (part(ratios[1]), part(ratios[2]));
    let train = n
        .checked_sub(val + test)
        .ok_or_else(|| Error::InvalidArgument(format!("{n} ids cannot fill {ratios:?}")))?;
    Ok([train, val, test])
}

/// Seeded shuffle followed by a contiguous train/val/test cut. Every train
/// id starts out labeled.
pub fn split_dataset(ids: &[u64], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(Error::EmptyData("no ids to split".into()));
    }
    let [n_train, n_val, _] = split_sizes(ids.len(), ratios)?;
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(DatasetSplit {
        labeled: order.clone(),
        train: order,
        val,
        test,
        unlabeled: Vec::new(),
        label_fraction: 1.0,
    })
}

/// Number of labeled images for a fraction of `n_train`.
pub fn labeled_count(n_train: usize, fraction: f64) -> usize {
    (fraction * n_train as f64).round() as usize
}

/// Marks `round(fraction * |train|)` train ids as labeled.
///
/// The labeled set is a prefix of one seeded permutation of the train ids,
/// so for a fixed seed smaller fractions are subsets of larger ones.
pub fn sample_label_fraction(
    split: &DatasetSplit,
    fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    let k = labeled_count(split.train.len(), fraction);
    if k == 0 {
        return Err(Error::EmptyData(format!(
            "fraction {fraction} of {} train images labels nothing",
            split.train.len()
        )));
    }
    let mut order = split.train.clone();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unlabeled = order.split_off(k);
    Ok(DatasetSplit {
        labeled: order,
        unlabeled,
        label_fraction: fraction,
        ..split.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u64) -> Vec<u64> {
        (1..=n).collect()
    }

    #[test]
    fn split_sizes_examples() {
        assert_eq!(split_sizes(100, DEFAULT_RATIOS).unwrap(), [65, 20, 15]);
        assert_eq!(split_sizes(848, DEFAULT_RATIOS).unwrap(), [550, 170, 128]);
        assert_eq!(split_sizes(924, DEFAULT_RATIOS).unwrap(), [600, 185, 139]);
        assert!(split_sizes(10, [0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let a = split_dataset(&ids(848), DEFAULT_RATIOS, 7).unwrap();
        let b = split_dataset(&ids(848), DEFAULT_RATIOS, 7).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<u64> = [a.train.clone(), a.val.clone(), a.test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, ids(848));
        assert!(split_dataset(&[], DEFAULT_RATIOS, 0).is_err());
    }

    #[test]
    fn label_fraction_sizes() {
        let s = split_dataset(&ids(848), DEFAULT_RATIOS, 1).unwrap();
        let full = sample_label_fraction(&s, 1.0, 3).unwrap();
        assert_eq!(full.labeled.len(), 550);
        assert!(full.unlabeled.is_empty());
        let tenth = sample_label_fraction(&s, 0.10, 3).unwrap();
        assert_eq!(tenth.labeled.len(), 55);
        assert_eq!(tenth.unlabeled.len(), 495);
        assert!(sample_label_fraction(&s, 0.0, 3).is_err());
        assert!(sample_label_fraction(&s, 0.0001, 3).is_err());
    }
}
