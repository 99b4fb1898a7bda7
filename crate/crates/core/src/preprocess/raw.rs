//! Raw-trial input: one PSTB container per subject plus a ratings manifest.
//!
//! A directory holds `s<subject>.pstb` files (e.g. `s01.pstb`) and
//! `ratings.csv` with header `subject,trial,valence,arousal`. Each container
//! entry is named `trial<k>.<group>`:
//!
//! | dataset | group          | shape              | rate   |
//! |---------|----------------|--------------------|--------|
//! | deap    | `signal`       | 40 x 8064          | 128 Hz |
//! | dreamer | `eeg`          | 14 x samples       | 128 Hz |
//! | dreamer | `eeg_baseline` | 14 x samples       | 128 Hz |
//! | dreamer | `ecg`          | 2 x samples        | 256 Hz |
//!
//! Converting the original distributions is a matter of copying arrays: DEAP's
//! `data[trial]` (40 x 8064) becomes `trial<k>.signal` and its `labels[trial]`
//! columns 0 and 1 become the valence and arousal columns; Dreamer's
//! `EEG.stimuli`, `EEG.baseline` and `ECG.stimuli` (transposed to channels x
//! samples) become `eeg`, `eeg_baseline` and `ecg`, with `ScoreValence` and
//! `ScoreArousal` as ratings.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::instances::Dataset;
use super::pipeline::{ChannelGroup, TrialRecord, DREAMER_ECG_HZ, RATE_HZ};
use super::pstb;
use crate::error::{io_err, Error, Result};

pub const RATINGS_FILE: &str = "ratings.csv";

#[derive(Debug, Deserialize)]
struct RatingRow {
    subject: u32,
    trial: u32,
    valence: f64,
    arousal: f64,
}

/// `(subject, trial) -> (valence, arousal)`.
pub fn read_ratings(path: &Path) -> Result<HashMap<(u32, u32), (f64, f64)>> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["subject", "trial", "valence", "arousal"] {
        return Err(malformed(format!("expected header subject,trial,valence,arousal, got {headers:?}")));
    }
    let mut out = HashMap::new();
    for row in reader.deserialize::<RatingRow>() {
        let r = row.map_err(|e| malformed(e.to_string()))?;
        if out.insert((r.subject, r.trial), (r.valence, r.arousal)).is_some() {
            return Err(malformed(format!("duplicate row for subject {} trial {}", r.subject, r.trial)));
        }
    }
    Ok(out)
}

fn group_rate(dataset: Dataset, group: &str) -> Option<usize> {
    match (dataset, group) {
        (Dataset::Deap, "signal") => Some(RATE_HZ),
        (Dataset::Dreamer, "eeg" | "eeg_baseline") => Some(RATE_HZ),
        (Dataset::Dreamer, "ecg") => Some(DREAMER_ECG_HZ),
        _ => None,
    }
}

fn subject_id(path: &Path) -> Option<u32> {
    let stem = path.file_stem()?.to_str()?;
    stem.strip_prefix('s')?.parse().ok()
}

/// Subject container paths in the directory, sorted by subject id.
pub fn subject_files(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "pstb") {
            if let Some(s) = subject_id(&path) {
                out.push((s, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Trials of one subject container, sorted by trial id.
pub fn read_subject(
    path: &Path,
    subject: u32,
    dataset: Dataset,
    ratings: &HashMap<(u32, u32), (f64, f64)>,
) -> Result<Vec<TrialRecord>> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut trials: BTreeMap<u32, Vec<ChannelGroup>> = BTreeMap::new();
    for (name, tensor) in pstb::load(path)? {
        let parsed = name
            .split_once('.')
            .and_then(|(t, g)| Some((t.strip_prefix("trial")?.parse::<u32>().ok()?, g)));
        let Some((trial, group)) = parsed else {
            return Err(malformed(format!("entry `{name}` is not named trial<k>.<group>")));
        };
        let rate = group_rate(dataset, group)
            .ok_or_else(|| malformed(format!("unknown {dataset} recording `{group}` in `{name}`")))?;
        if tensor.rank() != 2 {
            return Err(malformed(format!("`{name}` must be channels x samples, got {:?}", tensor.shape())));
        }
        trials.entry(trial).or_default().push(ChannelGroup::new(group, rate, tensor));
    }
    trials
        .into_iter()
        .map(|(trial, groups)| {
            let (valence, arousal) = *ratings.get(&(subject, trial)).ok_or_else(|| {
                malformed(format!("no ratings row for subject {subject} trial {trial}"))
            })?;
            Ok(TrialRecord {
                subject,
                trial,
                groups,
                valence,
                arousal,
            })
        })
        .collect()
}

/// Writes trials in the layout read by [`read_subject`] and appends their
/// ratings rows; used to build fixtures and converted datasets.
pub fn write_subject(dir: &Path, subject: u32, trials: &[TrialRecord]) -> Result<()> {
    let entries: Vec<_> = trials
        .iter()
        .flat_map(|t| {
            t.groups
                .iter()
                .map(move |g| (format!("trial{:02}.{}", t.trial, g.name), g.data.clone()))
        })
        .collect();
    pstb::save(&dir.join(format!("s{subject:02}.pstb")), &entries)?;
    let ratings = dir.join(RATINGS_FILE);
    let mut text = if ratings.exists() {
        std::fs::read_to_string(&ratings).map_err(io_err(&ratings))?
    } else {
        "subject,trial,valence,arousal\n".to_string()
    };
    for t in trials {
        text.push_str(&format!("{},{},{},{}\n", subject, t.trial, t.valence, t.arousal));
    }
    std::fs::write(&ratings, text).map_err(io_err(&ratings))
}
