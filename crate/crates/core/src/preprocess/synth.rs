//! Class-conditional synthetic recordings standing in for the restricted
//! datasets.
//!
//! Every instance draws two smooth unit-variance envelopes `a` and `b`. The EEG
//! grid carries `a` on spatial pattern A (left/right dipole) and `b` on pattern
//! B (front/back dipole). Peripheral channels are split into two groups and
//! the class decides which envelope goes where:
//!
//! | coupling  | peripheral channels                                          |
//! |-----------|--------------------------------------------------------------|
//! | `both`    | class 0: group 0 <- a, group 1 <- b; class 1 swaps them      |
//! | `token`   | every channel carries the class envelope (a or b)            |
//! | `channel` | as `both`, with each group circularly lagged by a random amount |
//! | `none`    | an independent envelope; the EEG shows only the class pattern |
//!
//! On top of that the EEG carries a static copy of the class pattern (A for
//! class 0, B for class 1) scaled by `marginal_gain`. It keeps the noise-free
//! classes linearly separable; with noise it is a weak single-modality cue,
//! while the envelope pairing is the strong cross-modal one.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grid::GRID;
use super::instances::{Dataset, InstanceSet, Provenance, Task};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    Token,
    Channel,
    #[default]
    Both,
    None,
}

impl std::fmt::Display for Coupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Token => "token",
            Self::Channel => "channel",
            Self::Both => "both",
            Self::None => "none",
        })
    }
}

impl std::str::FromStr for Coupling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Self::Token),
            "channel" => Ok(Self::Channel),
            "both" => Ok(Self::Both),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown coupling `{other}` (expected token, channel, both or none)"
            ))),
        }
    }
}

fn default_timestamps() -> usize {
    128
}

fn default_pps_channels() -> usize {
    8
}

pub const DEFAULT_MARGINAL_GAIN: f64 = 0.05;

fn default_marginal_gain() -> f64 {
    DEFAULT_MARGINAL_GAIN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_instances: usize,
    #[serde(default)]
    pub coupling: Coupling,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_timestamps")]
    pub timestamps: usize,
    #[serde(default = "default_pps_channels")]
    pub pps_channels: usize,
    #[serde(default = "default_marginal_gain")]
    pub marginal_gain: f64,
}

impl SynthSpec {
    pub fn new(n_instances: usize, coupling: Coupling, noise_std: f64, seed: u64) -> Self {
        Self {
            n_instances,
            coupling,
            noise_std,
            seed,
            timestamps: default_timestamps(),
            pps_channels: default_pps_channels(),
            marginal_gain: DEFAULT_MARGINAL_GAIN,
        }
    }

    pub fn with_shape(mut self, timestamps: usize, pps_channels: usize) -> Self {
        self.timestamps = timestamps;
        self.pps_channels = pps_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 || self.timestamps < 2 || self.pps_channels == 0 {
            return Err(contract("synthetic data needs n >= 1, T >= 2 and at least one peripheral channel"));
        }
        if !(self.marginal_gain >= 0.0 && self.marginal_gain.is_finite()) {
            return Err(contract(format!("marginal_gain must be finite and >= 0, got {}", self.marginal_gain)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(contract(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

fn dipole(rng: &[(f64, f64); 2]) -> Vec<f64> {
    let g = |r: usize, c: usize, (cr, cc): (f64, f64)| {
        (-((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)) / (2.0 * 1.5f64.powi(2))).exp()
    };
    let mut p: Vec<f64> = (0..GRID * GRID)
        .map(|i| g(i / GRID, i % GRID, rng[0]) - g(i / GRID, i % GRID, rng[1]))
        .collect();
    let m = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    p.iter_mut().for_each(|v| *v /= m);
    p
}

/// Left/right and front/back dipoles on the 9x9 grid.
pub fn spatial_patterns() -> [Vec<f64>; 2] {
    [dipole(&[(4.0, 2.0), (4.0, 6.0)]), dipole(&[(2.0, 4.0), (6.0, 4.0)])]
}

/// Zero-mean, unit-variance sum of three slow sinusoids.
fn envelope(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.5..3.0), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0)))
        .collect();
    let mut e: Vec<f64> = (0..t)
        .map(|i| {
            comps
                .iter()
                .map(|(f, ph, amp)| amp * (2.0 * PI * f * i as f64 / t as f64 + ph).sin())
                .sum()
        })
        .collect();
    let mean = e.iter().sum::<f64>() / t as f64;
    let sd = (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64).sqrt().max(1e-12);
    e.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    e
}

fn lagged(x: &[f64], lag: usize) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|i| x[(i + n - lag % n) % n]).collect()
}

pub fn synth_generate(spec: &SynthSpec) -> Result<InstanceSet> {
    spec.validate()?;
    let (n, t, k) = (spec.n_instances, spec.timestamps, spec.pps_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    labels.shuffle(&mut rng);
    let [pat_a, pat_b] = spatial_patterns();
    let group0 = k.div_ceil(2);
    let cells = GRID * GRID;
    let mut eeg = Vec::with_capacity(n * cells * t);
    let mut pps = Vec::with_capacity(n * k * t);
    for &class in &labels {
        let a = envelope(&mut rng, t);
        let b = envelope(&mut rng, t);
        let (first, second) = if class == 0 { (&a, &b) } else { (&b, &a) };
        let (eeg_b, per_channel): (&[f64], Vec<Vec<f64>>) = match spec.coupling {
            Coupling::Both => (&b, (0..k).map(|c| if c < group0 { first.clone() } else { second.clone() }).collect()),
            Coupling::Token => (&b, vec![first.clone(); k]),
            Coupling::Channel => {
                let lags = [rng.gen_range(t / 4..=3 * t / 4), rng.gen_range(t / 4..=3 * t / 4)];
                let g = [lagged(first, lags[0]), lagged(second, lags[1])];
                (&b, (0..k).map(|c| g[usize::from(c >= group0)].clone()).collect())
            }
            Coupling::None => {
                let z = envelope(&mut rng, t);
                (&[], vec![z; k])
            }
        };
        let (pa, pb) = match (spec.coupling, class) {
            (Coupling::None, 1) => (&pat_b, &pat_a),
            _ => (&pat_a, &pat_b),
        };
        let offset = if class == 0 { &pat_a } else { &pat_b };
        for cell in 0..cells {
            for i in 0..t {
                let mut v = pa[cell] * a[i] + spec.marginal_gain * offset[cell];
                if !eeg_b.is_empty() {
                    v += pb[cell] * eeg_b[i];
                }
                eeg.push(v);
            }
        }
        for ch in &per_channel {
            pps.extend_from_slice(ch);
        }
    }
    if spec.noise_std > 0.0 {
        for v in eeg.iter_mut().chain(pps.iter_mut()) {
            *v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    InstanceSet::new(
        Tensor::new([n, GRID, GRID, t], eeg)?,
        Tensor::new([n, k, t], pps)?,
        labels,
        Task::Valence,
        Dataset::Synthetic,
        (0..n as u32)
            .map(|i| Provenance {
                subject: 0,
                trial: i,
                segment: 0,
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn features(set: &InstanceSet, i: usize) -> Vec<f64> {
        let e = set.eeg.index_axis0(i).unwrap();
        let p = set.pps.index_axis0(i).unwrap();
        e.data().iter().chain(p.data()).copied().chain([1.0]).collect()
    }

    /// Kernel-form least squares on raw features; returns train accuracy.
    fn linear_probe_accuracy(set: &InstanceSet) -> f64 {
        let n = set.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| features(set, i)).collect();
        let x = DMatrix::from_fn(n, rows[0].len(), |r, c| rows[r][c]);
        let y = DVector::from_fn(n, |r, _| if set.labels[r] == 1 { 1.0 } else { -1.0 });
        let gram = &x * x.transpose();
        let alpha = gram.clone().lu().solve(&y).expect("full-rank Gram matrix");
        let fitted = gram * alpha;
        (0..n).filter(|&i| (fitted[i] > 0.0) == (set.labels[i] == 1)).count() as f64 / n as f64
    }

    fn project(set: &InstanceSet, i: usize, pattern: &[f64]) -> Vec<f64> {
        let t = set.timestamps();
        (0..t)
            .map(|s| (0..81).map(|c| pattern[c] * set.eeg.at(&[i, c / 9, c % 9, s])).sum())
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::new(20, Coupling::Both, 0.5, 9).with_shape(16, 4);
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.eeg), bits(&b.eeg));
        assert_eq!(bits(&a.pps), bits(&b.pps));
        assert_eq!(a.labels, b.labels);
        let c = synth_generate(&SynthSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.eeg, c.eeg);
    }

    #[test]
    fn labels_are_balanced() {
        for n in [1000, 1001, 2000] {
            let set = synth_generate(&SynthSpec::new(n, Coupling::Both, 0.5, 1).with_shape(4, 2)).unwrap();
            let frac = set.positives() as f64 / n as f64;
            assert!((frac - 0.5).abs() <= 0.02, "{n}: {frac}");
        }
    }

    #[test]
    fn default_shape() {
        let set = synth_generate(&SynthSpec::new(3, Coupling::Token, 0.1, 1)).unwrap();
        assert_eq!(set.eeg.shape(), &[3, 9, 9, 128]);
        assert_eq!(set.pps.shape(), &[3, 8, 128]);
    }

    #[test]
    fn noise_free_linear_probe_separates() {
        let set = synth_generate(&SynthSpec::new(48, Coupling::Both, 0.0, 3).with_shape(16, 8)).unwrap();
        assert_eq!(linear_probe_accuracy(&set), 1.0);
    }

    #[test]
    fn class_lives_in_cross_modal_pairing() {
        let [pa, pb] = spatial_patterns();
        let set = synth_generate(&SynthSpec::new(64, Coupling::Both, 0.0, 5).with_shape(32, 4)).unwrap();
        for i in 0..set.len() {
            let group0 = set.pps.index_axis0(i).unwrap().data()[..32].to_vec();
            let score = dot(&project(&set, i, &pa), &group0) - dot(&project(&set, i, &pb), &group0);
            assert_eq!(usize::from(score < 0.0), set.labels[i], "instance {i}");
        }
    }

    #[test]
    fn none_coupling_shows_class_pattern_only() {
        let [pa, pb] = spatial_patterns();
        let set = synth_generate(&SynthSpec::new(32, Coupling::None, 0.0, 2).with_shape(16, 2)).unwrap();
        for i in 0..set.len() {
            let ea = project(&set, i, &pa).iter().map(|v| v * v).sum::<f64>();
            let eb = project(&set, i, &pb).iter().map(|v| v * v).sum::<f64>();
            assert_eq!(usize::from(eb > ea), set.labels[i]);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!("bogus".parse::<Coupling>().is_err());
        assert!(synth_generate(&SynthSpec::new(0, Coupling::Both, 0.1, 1)).is_err());
        assert!(synth_generate(&SynthSpec::new(4, Coupling::Both, -1.0, 1)).is_err());
    }
}
