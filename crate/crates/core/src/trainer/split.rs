//! Seeded train/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::preprocess::instances::InstanceSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Shuffle the pooled instances.
    #[default]
    Random,
    /// Keep every subject's instances on one side.
    Subject,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "subject" => Ok(Self::Subject),
            other => Err(Error::Config(format!("unknown split mode `{other}`"))),
        }
    }
}

/// Number of training items for `n` items at `ratio`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    // Guard against 0.8 * 100 landing a hair above 80.
    let exact = ratio * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() <= 1e-9 * n.max(1) as f64 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Shuffled `(train, test)` index lists; train holds `ceil(ratio * n)` items.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(contract("cannot split an empty dataset"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1], got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(train_count(n, ratio).min(n));
    Ok((idx, test))
}

/// Subject-held-out variant: `ceil(ratio * subjects)` subjects go to training.
pub fn split_subject_indices(set: &InstanceSet, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut subjects: Vec<u32> = set.provenance.iter().map(|p| p.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let (train_s, _) = split_indices(subjects.len(), ratio, seed)?;
    let train_set: std::collections::HashSet<u32> = train_s.iter().map(|&i| subjects[i]).collect();
    Ok((0..set.len()).partition(|&i| train_set.contains(&set.provenance[i].subject)))
}

/// Splits a dataset; both sides must be non-empty.
pub fn split(set: &InstanceSet, ratio: f64, seed: u64, mode: SplitMode) -> Result<(InstanceSet, InstanceSet)> {
    let (train, test) = match mode {
        SplitMode::Random => split_indices(set.len(), ratio, seed)?,
        SplitMode::Subject => split_subject_indices(set, ratio, seed)?,
    };
    if train.is_empty() || test.is_empty() {
        return Err(contract(format!(
            "split of {} instances left an empty side ({} train, {} test)",
            set.len(),
            train.len(),
            test.len()
        )));
    }
    Ok((set.subset(&train)?, set.subset(&test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::instances::{Dataset, Provenance, Task};
    use crate::tensor::Tensor;

    #[test]
    fn sizes() {
        assert_eq!(train_count(100, 0.8), 80);
        assert_eq!(train_count(101, 0.8), 81);
        assert_eq!(train_count(2000, 0.8), 1600);
        assert_eq!(train_count(3, 0.8), 3);
        let (a, b) = split_indices(100, 0.8, 7).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
        assert!(split_indices(0, 0.8, 7).is_err());
    }

    #[test]
    fn seeded_disjoint_exhaustive() {
        let (a, b) = split_indices(57, 0.8, 3).unwrap();
        assert_eq!(split_indices(57, 0.8, 3).unwrap(), (a.clone(), b.clone()));
        assert_ne!(split_indices(57, 0.8, 4).unwrap().0, a);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..57).collect::<Vec<_>>());
    }

    #[test]
    fn subject_split_keeps_subjects_together() {
        let n = 40;
        let prov: Vec<Provenance> = (0..n).map(|i| Provenance { subject: i / 4, trial: 0, segment: i % 4 }).collect();
        let set = InstanceSet::new(
            Tensor::zeros([n as usize, 1, 1, 2]).unwrap(),
            Tensor::zeros([n as usize, 1, 2]).unwrap(),
            vec![0; n as usize],
            Task::Valence,
            Dataset::Synthetic,
            prov,
        )
        .unwrap();
        let (tr, te) = split(&set, 0.8, 1, SplitMode::Subject).unwrap();
        assert_eq!((tr.len(), te.len()), (32, 8));
        let s: std::collections::HashSet<u32> = tr.provenance.iter().map(|p| p.subject).collect();
        assert!(te.provenance.iter().all(|p| !s.contains(&p.subject)));
        let (tr, te) = split(&set, 0.8, 1, SplitMode::Random).unwrap();
        assert_eq!((tr.len(), te.len()), (32, 8));
    }
}
