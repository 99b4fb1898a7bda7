//! Model-ready instance sets and their PSTB layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pstb;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Which rating is binarised into the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Valence,
    Arousal,
}

impl Task {
    fn code(self) -> f64 {
        match self {
            Self::Valence => 0.0,
            Self::Arousal => 1.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        match c as i64 {
            0 => Some(Self::Valence),
            1 => Some(Self::Arousal),
            _ => None,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Valence => "valence",
            Self::Arousal => "arousal",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valence" => Ok(Self::Valence),
            "arousal" => Ok(Self::Arousal),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Deap,
    Dreamer,
    Synthetic,
}

impl Dataset {
    fn code(self) -> f64 {
        match self {
            Self::Deap => 0.0,
            Self::Dreamer => 1.0,
            Self::Synthetic => 2.0,
        }
    }

    fn from_code(c: f64) -> Option<Self> {
        match c as i64 {
            0 => Some(Self::Deap),
            1 => Some(Self::Dreamer),
            2 => Some(Self::Synthetic),
            _ => None,
        }
    }
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Deap => "deap",
            Self::Dreamer => "dreamer",
            Self::Synthetic => "synthetic",
        })
    }
}

impl std::str::FromStr for Dataset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deap" => Ok(Self::Deap),
            "dreamer" => Ok(Self::Dreamer),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Where an instance came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub subject: u32,
    pub trial: u32,
    pub segment: u32,
}

/// `eeg: [N, H, W, T]`, `pps: [N, K, T]`, one binary label per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    pub eeg: Tensor,
    pub pps: Tensor,
    pub labels: Vec<usize>,
    pub task: Task,
    pub dataset: Dataset,
    pub provenance: Vec<Provenance>,
}

impl InstanceSet {
    pub fn new(
        eeg: Tensor,
        pps: Tensor,
        labels: Vec<usize>,
        task: Task,
        dataset: Dataset,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let set = Self {
            eeg,
            pps,
            labels,
            task,
            dataset,
            provenance,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.eeg.rank() != 4 || self.pps.rank() != 3 {
            return Err(Error::Shape {
                op: "instance set",
                lhs: self.eeg.shape().to_vec(),
                rhs: self.pps.shape().to_vec(),
            });
        }
        if self.eeg.shape()[0] != n || self.pps.shape()[0] != n || self.provenance.len() != n {
            return Err(contract(format!(
                "instance set parts disagree on N: eeg {}, pps {}, labels {n}, provenance {}",
                self.eeg.shape()[0],
                self.pps.shape()[0],
                self.provenance.len()
            )));
        }
        if self.eeg.shape()[3] != self.pps.shape()[2] {
            return Err(contract("EEG and PPS instances must share the time axis"));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(contract(format!("labels must be binary, found {bad}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn timestamps(&self) -> usize {
        self.eeg.shape()[3]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.eeg.shape()[1], self.eeg.shape()[2])
    }

    pub fn pps_channels(&self) -> usize {
        self.pps.shape()[1]
    }

    /// Instances at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(contract("empty subset"));
        }
        Ok(Self {
            eeg: self.eeg.gather_axis0(idx)?,
            pps: self.pps.gather_axis0(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            task: self.task,
            dataset: self.dataset,
            provenance: idx.iter().map(|&i| self.provenance[i]).collect(),
        })
    }

    /// Concatenates sets along the instance axis.
    pub fn concat(sets: &[InstanceSet]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| contract("concatenating no instance sets"))?;
        let mut eeg = Vec::new();
        let mut pps = Vec::new();
        let mut labels = Vec::new();
        let mut provenance = Vec::new();
        for s in sets {
            if s.eeg.shape()[1..] != first.eeg.shape()[1..] || s.pps.shape()[1..] != first.pps.shape()[1..] {
                return Err(Error::Shape {
                    op: "concat instance sets",
                    lhs: first.eeg.shape().to_vec(),
                    rhs: s.eeg.shape().to_vec(),
                });
            }
            eeg.extend_from_slice(s.eeg.data());
            pps.extend_from_slice(s.pps.data());
            labels.extend_from_slice(&s.labels);
            provenance.extend_from_slice(&s.provenance);
        }
        let n = labels.len();
        let mut es = first.eeg.shape().to_vec();
        let mut ps = first.pps.shape().to_vec();
        es[0] = n;
        ps[0] = n;
        Self::new(
            Tensor::new(es, eeg)?,
            Tensor::new(ps, pps)?,
            labels,
            first.task,
            first.dataset,
            provenance,
        )
    }

    pub fn to_entries(&self) -> Result<Vec<(String, Tensor)>> {
        let n = self.len();
        let prov: Vec<f64> = self
            .provenance
            .iter()
            .flat_map(|p| [p.subject as f64, p.trial as f64, p.segment as f64])
            .collect();
        Ok(vec![
            ("eeg".into(), self.eeg.clone()),
            ("pps".into(), self.pps.clone()),
            ("labels".into(), Tensor::new([n], self.labels.iter().map(|&l| l as f64).collect())?),
            ("provenance".into(), Tensor::new([n, 3], prov)?),
            ("meta".into(), Tensor::vector(&[self.task.code(), self.dataset.code()])?),
        ])
    }

    pub fn from_entries(entries: &[(String, Tensor)], path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let get = |name: &str| pstb::find(entries, name).ok_or_else(|| malformed(format!("missing entry `{name}`")));
        let (eeg, pps, labels, prov, meta) = (get("eeg")?, get("pps")?, get("labels")?, get("provenance")?, get("meta")?);
        let labels = labels
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                _ => Err(malformed(format!("non-binary label {v}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if prov.rank() != 2 || prov.shape()[1] != 3 {
            return Err(malformed(format!("provenance shape {:?}", prov.shape())));
        }
        let provenance = prov
            .data()
            .chunks(3)
            .map(|c| Provenance {
                subject: c[0] as u32,
                trial: c[1] as u32,
                segment: c[2] as u32,
            })
            .collect();
        let (task, dataset) = match meta.data() {
            [t, d] => (Task::from_code(*t), Dataset::from_code(*d)),
            _ => (None, None),
        };
        let (Some(task), Some(dataset)) = (task, dataset) else {
            return Err(malformed("bad task/dataset codes".into()));
        };
        Self::new(eeg.clone(), pps.clone(), labels, task, dataset, provenance)
            .map_err(|e| malformed(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        pstb::save(path, &self.to_entries()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&pstb::load(path)?, path)
    }

    /// Count of label 1.
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> InstanceSet {
        let eeg = Tensor::new([n, 2, 2, 3], (0..n * 12).map(|v| v as f64).collect()).unwrap();
        let pps = Tensor::new([n, 1, 3], (0..n * 3).map(|v| -(v as f64)).collect()).unwrap();
        let prov = (0..n as u32).map(|i| Provenance { subject: 1, trial: 2, segment: i }).collect();
        InstanceSet::new(eeg, pps, (0..n).map(|i| i % 2).collect(), Task::Arousal, Dataset::Synthetic, prov).unwrap()
    }

    #[test]
    fn pstb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set.pstb");
        let s = tiny(5);
        s.save(&p).unwrap();
        assert_eq!(InstanceSet::load(&p).unwrap(), s);
    }

    #[test]
    fn subset_and_concat() {
        let s = tiny(4);
        let a = s.subset(&[0, 1]).unwrap();
        let b = s.subset(&[2, 3]).unwrap();
        assert_eq!(InstanceSet::concat(&[a, b]).unwrap(), s);
        let r = s.subset(&[3, 0]).unwrap();
        assert_eq!(r.labels, vec![1, 0]);
        assert_eq!(r.provenance[0].segment, 3);
        assert!(s.subset(&[]).is_err());
    }

    #[test]
    fn validation() {
        let s = tiny(2);
        let mut bad = s.clone();
        bad.labels[0] = 2;
        assert!(bad.validate().is_err());
        let mut bad = s.clone();
        bad.labels.push(0);
        assert!(bad.validate().is_err());
        assert_eq!("arousal".parse::<Task>().unwrap(), Task::Arousal);
        assert!("dominance".parse::<Task>().is_err());
    }
}
