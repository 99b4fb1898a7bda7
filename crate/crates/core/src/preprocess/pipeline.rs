//! Raw trial to instance pipelines for DEAP- and Dreamer-shaped recordings.

use super::filter::{Sos, BUTTER_ORDER};
use super::grid::{map_to_grid, zscore_in_place, ChannelGridMap};
use super::instances::{Dataset, InstanceSet, Provenance, Task};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

pub const RATE_HZ: usize = 128;
pub const SEGMENTS: usize = 60;
pub const SEGMENT_LEN: usize = RATE_HZ;

pub const DEAP_EEG: usize = 32;
pub const DEAP_PPS: usize = 8;
pub const DEAP_CHANNELS: usize = DEAP_EEG + DEAP_PPS;
pub const DEAP_BASELINE: usize = 3 * RATE_HZ;
pub const DEAP_SAMPLES: usize = DEAP_BASELINE + SEGMENTS * RATE_HZ;
pub const DEAP_THRESHOLD: f64 = 5.0;

pub const DREAMER_EEG: usize = 14;
pub const DREAMER_ECG: usize = 2;
pub const DREAMER_ECG_HZ: usize = 256;
pub const DREAMER_FILTERED_S: usize = 62;
pub const DREAMER_BASELINE_S: usize = 61;
pub const DREAMER_THRESHOLD: f64 = 3.0;
pub const DREAMER_BAND_HZ: (f64, f64) = (4.0, 45.0);

/// Channels recorded at one rate, `[channels, samples]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGroup {
    pub name: String,
    pub rate_hz: usize,
    pub data: Tensor,
}

impl ChannelGroup {
    pub fn new(name: &str, rate_hz: usize, data: Tensor) -> Self {
        Self {
            name: name.to_string(),
            rate_hz,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.data.shape().get(1).copied().unwrap_or(0)
    }

    fn row(&self, c: usize) -> &[f64] {
        let n = self.samples();
        &self.data.data()[c * n..(c + 1) * n]
    }
}

/// One subject watching one stimulus.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub subject: u32,
    pub trial: u32,
    pub groups: Vec<ChannelGroup>,
    pub valence: f64,
    pub arousal: f64,
}

impl TrialRecord {
    pub fn group(&self, name: &str) -> Result<&ChannelGroup> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| contract(format!("subject {} trial {}: no `{name}` recording", self.subject, self.trial)))
    }

    pub fn rating(&self, task: Task) -> f64 {
        match task {
            Task::Valence => self.valence,
            Task::Arousal => self.arousal,
        }
    }

    fn expect(&self, g: &ChannelGroup, channels: usize, rate: usize, min_samples: usize) -> Result<()> {
        if g.data.rank() != 2 || g.channels() != channels || g.rate_hz != rate || g.samples() < min_samples {
            return Err(contract(format!(
                "subject {} trial {}: `{}` must be {channels} channels x >= {min_samples} samples at {rate} Hz, got {:?} at {} Hz",
                self.subject,
                self.trial,
                g.name,
                g.data.shape(),
                g.rate_hz
            )));
        }
        Ok(())
    }
}

/// 1 when the rating is strictly above the threshold; ties go to class 0.
pub fn threshold_label(rating: f64, threshold: f64) -> usize {
    usize::from(rating > threshold)
}

/// Anti-aliased decimation of every row by the integer factor `from / to`.
pub fn downsample(x: &Tensor, from_hz: usize, to_hz: usize) -> Result<Tensor> {
    if to_hz == 0 || !from_hz.is_multiple_of(to_hz) || x.rank() != 2 {
        return Err(contract(format!(
            "downsampling needs a [channels, samples] input and an integer rate ratio, got {:?} from {from_hz} to {to_hz} Hz",
            x.shape()
        )));
    }
    let factor = from_hz / to_hz;
    if factor == 1 {
        return Ok(x.clone());
    }
    let sos = Sos::butter_lowpass(BUTTER_ORDER, 0.45 * to_hz as f64, from_hz as f64)?;
    let (c, n) = (x.shape()[0], x.shape()[1]);
    let out_len = n.div_ceil(factor);
    let mut out = Vec::with_capacity(c * out_len);
    for row in x.data().chunks(n) {
        let y = sos.filtfilt(row)?;
        out.extend(y.iter().step_by(factor));
    }
    Tensor::new([c, out_len], out)
}

/// Grid frames `[samples, H*W]` from EEG rows `[channels, samples]`, z-scored.
fn grid_frames(eeg: &[Vec<f64>], map: &ChannelGridMap) -> Result<Vec<Vec<f64>>> {
    let samples = eeg.first().map_or(0, Vec::len);
    let mut frame = vec![0.0; eeg.len()];
    (0..samples)
        .map(|t| {
            for (f, row) in frame.iter_mut().zip(eeg) {
                *f = row[t];
            }
            let mut g = map_to_grid(&frame, map)?.into_data();
            zscore_in_place(&mut g);
            Ok(g)
        })
        .collect()
}

/// Cuts `frames` (last `SEGMENTS * SEGMENT_LEN` used) and PPS rows into instances.
fn segment(
    frames: &[Vec<f64>],
    map: &ChannelGridMap,
    pps: &[Vec<f64>],
    label: usize,
    trial: &TrialRecord,
    task: Task,
    dataset: Dataset,
) -> Result<InstanceSet> {
    let (h, w) = (map.height, map.width);
    let span = SEGMENTS * SEGMENT_LEN;
    let f0 = frames.len() - span;
    let mut eeg = Vec::with_capacity(SEGMENTS * h * w * SEGMENT_LEN);
    let mut pps_out = Vec::with_capacity(SEGMENTS * pps.len() * SEGMENT_LEN);
    for s in 0..SEGMENTS {
        let window = &frames[f0 + s * SEGMENT_LEN..][..SEGMENT_LEN];
        for cell in 0..h * w {
            eeg.extend(window.iter().map(|f| f[cell]));
        }
        for row in pps {
            let p0 = row.len() - span + s * SEGMENT_LEN;
            pps_out.extend_from_slice(&row[p0..p0 + SEGMENT_LEN]);
        }
    }
    InstanceSet::new(
        Tensor::new([SEGMENTS, h, w, SEGMENT_LEN], eeg)?,
        Tensor::new([SEGMENTS, pps.len(), SEGMENT_LEN], pps_out)?,
        vec![label; SEGMENTS],
        task,
        dataset,
        (0..SEGMENTS as u32)
            .map(|segment| Provenance {
                subject: trial.subject,
                trial: trial.trial,
                segment,
            })
            .collect(),
    )
}

/// DEAP-shaped trial: group `signal`, 40 x 8064 at 128 Hz (32 EEG rows then 8
/// peripheral rows); the first 3 s are the baseline.
pub fn deap_pipeline(trial: &TrialRecord, map: &ChannelGridMap, task: Task, threshold: f64) -> Result<InstanceSet> {
    let g = trial.group("signal")?;
    trial.expect(g, DEAP_CHANNELS, RATE_HZ, DEAP_SAMPLES)?;
    if g.samples() != DEAP_SAMPLES {
        return Err(contract(format!(
            "subject {} trial {}: expected {DEAP_SAMPLES} samples, got {}",
            trial.subject,
            trial.trial,
            g.samples()
        )));
    }
    if map.channels() != DEAP_EEG {
        return Err(contract(format!("DEAP map must place {DEAP_EEG} channels, has {}", map.channels())));
    }
    let rows: Vec<Vec<f64>> = (0..DEAP_CHANNELS)
        .map(|c| {
            let row = g.row(c);
            let mut base = [0.0; SEGMENT_LEN];
            for k in 0..DEAP_BASELINE / SEGMENT_LEN {
                for (b, v) in base.iter_mut().zip(&row[k * SEGMENT_LEN..]) {
                    *b += v;
                }
            }
            let parts = (DEAP_BASELINE / SEGMENT_LEN) as f64;
            base.iter_mut().for_each(|b| *b /= parts);
            row[DEAP_BASELINE..]
                .iter()
                .enumerate()
                .map(|(t, v)| v - base[t % SEGMENT_LEN])
                .collect()
        })
        .collect();
    let frames = grid_frames(&rows[..DEAP_EEG], map)?;
    let label = threshold_label(trial.rating(task), threshold);
    segment(&frames, map, &rows[DEAP_EEG..], label, trial, task, Dataset::Deap)
}

fn common_average(rows: &mut [Vec<f64>]) {
    let n = rows.first().map_or(0, Vec::len);
    let c = rows.len() as f64;
    for t in 0..n {
        let mean = rows.iter().map(|r| r[t]).sum::<f64>() / c;
        rows.iter_mut().for_each(|r| r[t] -= mean);
    }
}

/// Dreamer-shaped trial: groups `eeg` (14 channels, >= 62 s at 128 Hz),
/// `eeg_baseline` (14 channels, >= 61 s at 128 Hz) and `ecg` (2 channels,
/// >= 60 s at 256 Hz).
pub fn dreamer_pipeline(trial: &TrialRecord, map: &ChannelGridMap, task: Task, threshold: f64) -> Result<InstanceSet> {
    let stim = trial.group("eeg")?;
    let base = trial.group("eeg_baseline")?;
    let ecg = trial.group("ecg")?;
    trial.expect(stim, DREAMER_EEG, RATE_HZ, DREAMER_FILTERED_S * RATE_HZ)?;
    trial.expect(base, DREAMER_EEG, RATE_HZ, DREAMER_BASELINE_S * RATE_HZ)?;
    trial.expect(ecg, DREAMER_ECG, DREAMER_ECG_HZ, SEGMENTS * DREAMER_ECG_HZ)?;
    if map.channels() != DREAMER_EEG {
        return Err(contract(format!("Dreamer map must place {DREAMER_EEG} channels, has {}", map.channels())));
    }
    let tail = |g: &ChannelGroup, secs: usize| -> Vec<Vec<f64>> {
        let keep = secs * g.rate_hz;
        (0..g.channels()).map(|c| g.row(c)[g.samples() - keep..].to_vec()).collect()
    };
    let mut eeg = tail(stim, DREAMER_FILTERED_S);
    let mut baseline = tail(base, DREAMER_BASELINE_S);
    common_average(&mut eeg);
    common_average(&mut baseline);
    let sos = Sos::butter_bandpass(BUTTER_ORDER, DREAMER_BAND_HZ.0, DREAMER_BAND_HZ.1, RATE_HZ as f64)?;
    for (row, b) in eeg.iter_mut().zip(&baseline) {
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        *row = sos.filtfilt(row)?.into_iter().map(|v| v - mean).collect();
    }
    let frames = grid_frames(&eeg, map)?;
    let ecg = downsample(&ecg.data, DREAMER_ECG_HZ, RATE_HZ)?;
    let n = ecg.shape()[1];
    let ecg_rows: Vec<Vec<f64>> = ecg.data().chunks(n).map(<[f64]>::to_vec).collect();
    let label = threshold_label(trial.rating(task), threshold);
    segment(&frames, map, &ecg_rows, label, trial, task, Dataset::Dreamer)
}

/// Instances produced per trial by either pipeline.
pub const fn instances_per_trial() -> usize {
    SEGMENTS
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor {
        Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    pub(crate) fn deap_trial(seed: u64, valence: f64) -> TrialRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrialRecord {
            subject: 1,
            trial: seed as u32,
            groups: vec![ChannelGroup::new("signal", RATE_HZ, noise(&mut rng, [DEAP_CHANNELS, DEAP_SAMPLES]))],
            valence,
            arousal: 9.0 - valence,
        }
    }

    fn dreamer_trial(seed: u64) -> TrialRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrialRecord {
            subject: 2,
            trial: 3,
            groups: vec![
                ChannelGroup::new("eeg", RATE_HZ, noise(&mut rng, [14, 70 * RATE_HZ])),
                ChannelGroup::new("eeg_baseline", RATE_HZ, noise(&mut rng, [14, 61 * RATE_HZ])),
                ChannelGroup::new("ecg", DREAMER_ECG_HZ, noise(&mut rng, [2, 70 * DREAMER_ECG_HZ])),
            ],
            valence: 4.0,
            arousal: 3.0,
        }
    }

    fn frame_stats(set: &InstanceSet) -> (f64, f64) {
        let (mut worst_mu, mut worst_sd) = (0.0f64, 0.0f64);
        let e = &set.eeg;
        for i in 0..set.len() {
            for t in 0..SEGMENT_LEN {
                let cells: Vec<f64> = (0..81).map(|c| e.at(&[i, c / 9, c % 9, t])).collect();
                let mu = cells.iter().sum::<f64>() / 81.0;
                let sd = (cells.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 81.0).sqrt();
                worst_mu = worst_mu.max(mu.abs());
                worst_sd = worst_sd.max((sd - 1.0).abs());
            }
        }
        (worst_mu, worst_sd)
    }

    #[test]
    fn thresholds() {
        assert_eq!(threshold_label(7.0, DEAP_THRESHOLD), 1);
        assert_eq!(threshold_label(5.0, DEAP_THRESHOLD), 0);
        assert_eq!(threshold_label(2.0, DREAMER_THRESHOLD), 0);
        assert_eq!(threshold_label(3.5, DREAMER_THRESHOLD), 1);
    }

    #[test]
    fn deap_shapes_and_labels() {
        let map = ChannelGridMap::deap();
        let set = deap_pipeline(&deap_trial(1, 7.0), &map, Task::Valence, DEAP_THRESHOLD).unwrap();
        assert_eq!(set.len(), 60);
        assert_eq!(set.eeg.shape(), &[60, 9, 9, 128]);
        assert_eq!(set.pps.shape(), &[60, 8, 128]);
        assert!(set.labels.iter().all(|&l| l == 1));
        let arousal = deap_pipeline(&deap_trial(1, 7.0), &map, Task::Arousal, DEAP_THRESHOLD).unwrap();
        assert!(arousal.labels.iter().all(|&l| l == 0));
        let (mu, sd) = frame_stats(&set);
        assert!(mu <= 1e-12 && sd <= 1e-9, "{mu} {sd}");
        assert_eq!(set.provenance[59].segment, 59);
    }

    #[test]
    fn deap_baseline_removal() {
        // Stimulus equal to the tiled baseline mean cancels to zero, and z-scoring
        // a zero frame yields zeros.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pattern = noise(&mut rng, [DEAP_CHANNELS, SEGMENT_LEN]);
        let data: Vec<f64> = (0..DEAP_CHANNELS)
            .flat_map(|c| {
                let p = &pattern.data()[c * SEGMENT_LEN..(c + 1) * SEGMENT_LEN];
                (0..DEAP_SAMPLES).map(move |t| p[t % SEGMENT_LEN])
            })
            .collect();
        let mut trial = deap_trial(0, 1.0);
        trial.groups[0].data = Tensor::new([DEAP_CHANNELS, DEAP_SAMPLES], data).unwrap();
        let set = deap_pipeline(&trial, &ChannelGridMap::deap(), Task::Valence, 5.0).unwrap();
        assert!(set.eeg.data().iter().all(|v| *v == 0.0));
        assert!(set.pps.data().iter().all(|v| v.abs() <= 1e-15));
    }

    #[test]
    fn deap_offset_invariance() {
        let map = ChannelGridMap::deap();
        let trial = deap_trial(8, 6.0);
        let mut shifted = trial.clone();
        shifted.groups[0].data = trial.groups[0].data.map(|v| v + 12.5);
        let a = deap_pipeline(&trial, &map, Task::Valence, 5.0).unwrap();
        let b = deap_pipeline(&shifted, &map, Task::Valence, 5.0).unwrap();
        assert!(a.eeg.max_abs_diff(&b.eeg) <= 1e-9);
        assert!(a.pps.max_abs_diff(&b.pps) <= 1e-12);
    }

    #[test]
    fn deap_rejects_wrong_shapes() {
        let map = ChannelGridMap::deap();
        let mut t = deap_trial(1, 5.0);
        t.groups[0].data = Tensor::zeros([39, DEAP_SAMPLES]).unwrap();
        assert!(deap_pipeline(&t, &map, Task::Valence, 5.0).is_err());
        t.groups[0].data = Tensor::zeros([40, DEAP_SAMPLES - 1]).unwrap();
        assert!(deap_pipeline(&t, &map, Task::Valence, 5.0).is_err());
        t.groups.clear();
        assert!(deap_pipeline(&t, &map, Task::Valence, 5.0).is_err());
    }

    #[test]
    fn dreamer_shapes() {
        let set = dreamer_pipeline(&dreamer_trial(3), &ChannelGridMap::dreamer(), Task::Valence, DREAMER_THRESHOLD).unwrap();
        assert_eq!(set.eeg.shape(), &[60, 9, 9, 128]);
        assert_eq!(set.pps.shape(), &[60, 2, 128]);
        assert!(set.labels.iter().all(|&l| l == 1));
        let arousal = dreamer_pipeline(&dreamer_trial(3), &ChannelGridMap::dreamer(), Task::Arousal, DREAMER_THRESHOLD).unwrap();
        assert!(arousal.labels.iter().all(|&l| l == 0));
        let (mu, sd) = frame_stats(&set);
        assert!(mu <= 1e-12 && sd <= 1e-9);
    }

    #[test]
    fn downsample_examples() {
        let c = Tensor::full([2, 512], 1.5).unwrap();
        let d = downsample(&c, 256, 128).unwrap();
        assert_eq!(d.shape(), &[2, 256]);
        assert!(d.data().iter().all(|v| (v - 1.5).abs() <= 1e-9));
        assert!(downsample(&c, 256, 100).is_err());

        let n = 256 * 20;
        let tone: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / 256.0).sin()).collect();
        let d = downsample(&Tensor::new([1, n], tone).unwrap(), 256, 128).unwrap();
        let mid = &d.data()[128 * 3..128 * 17];
        let peak = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() <= 0.02, "{peak}");
        for (i, v) in mid.iter().enumerate().step_by(17) {
            let want = (2.0 * std::f64::consts::PI * 5.0 * (i + 128 * 3) as f64 / 128.0).sin();
            assert!((v - want).abs() <= 0.02);
        }
    }
}
