//! Optimisation, evaluation, checkpoints and the ablation runner.

pub mod ablation;
pub mod adam;
pub mod checkpoint;
pub mod split;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::PosEncMode;
use crate::error::{contract, Error, Result};
use crate::exec::{chunk_ranges, par_map, Execution};
use crate::fusion::FusionMode;
use crate::model::{ModelConfig, ModelParams, Tacoformer};
use crate::preprocess::instances::{InstanceSet, Task};
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use split::{split, SplitMode};

/// Architecture choices; input extents come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub fusion: FusionMode,
    pub posenc: PosEncMode,
    pub two_layer_ffn: bool,
    pub zero_init_classifier: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            fusion: FusionMode::Taco,
            posenc: PosEncMode::TwoD,
            two_layer_ffn: false,
            zero_init_classifier: true,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, grid: (usize, usize), pps_channels: usize, timestamps: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(grid, pps_channels, timestamps, self.d_model, self.heads, self.layers)
            .with_fusion(self.fusion)
            .with_posenc(self.posenc);
        cfg.eeg.two_layer_ffn = self.two_layer_ffn;
        cfg.pps.two_layer_ffn = self.two_layer_ffn;
        cfg.zero_init_classifier = self.zero_init_classifier;
        cfg
    }

    /// Model shaped for `set`.
    pub fn model_for(&self, set: &InstanceSet) -> Result<Tacoformer> {
        Tacoformer::new(self.model_config(set.grid(), set.pps_channels(), set.timestamps()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub task: Task,
    pub split_ratio: f64,
    pub split_mode: SplitMode,
    pub execution: Execution,
    /// Instances per independent tape; gradients are reduced chunk by chunk in
    /// index order, so results do not depend on `execution`.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 120,
            epochs: 50,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            task: Task::Valence,
            split_ratio: 0.8,
            split_mode: SplitMode::Random,
            execution: Execution::Parallel,
            chunk_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("batch_size and chunk_size must be positive".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must be in (0, 1), got {}", self.split_ratio)));
        }
        Ok(())
    }
}

/// Everything a run needs; the JSON config file mirrors this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the epoch's batches, weighted by batch size.
    pub train_loss: f64,
    /// Accuracy of the predictions made while training (before each update).
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; 2]; 2],
}

/// Loss, gradients and probabilities of one batch, computed chunk by chunk.
pub fn batch_backprop(
    model: &Tacoformer,
    params: &ModelParams<Tensor>,
    set: &InstanceSet,
    idx: &[usize],
    exec: Execution,
    chunk: usize,
) -> Result<(f64, ModelParams<Tensor>, Vec<[f64; 2]>)> {
    if idx.is_empty() {
        return Err(contract("batch loss of an empty batch"));
    }
    let chunks: Vec<&[usize]> = chunk_ranges(idx.len(), chunk).into_iter().map(|r| &idx[r]).collect();
    let parts = par_map(exec, &chunks, |c| {
        let labels: Vec<usize> = c.iter().map(|&i| set.labels[i]).collect();
        model.backprop(params, &set.eeg.gather_axis0(c)?, &set.pps.gather_axis0(c)?, &labels)
    });
    let total = idx.len() as f64;
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    let mut probs = Vec::with_capacity(idx.len());
    for (part, c) in parts.into_iter().zip(&chunks) {
        let part = part?;
        let w = c.len() as f64 / total;
        loss += w * part.loss;
        grads.add_scaled(&part.grads, w);
        probs.extend(part.probabilities.data().chunks(2).map(|p| [p[0], p[1]]));
    }
    Ok((loss, grads, probs))
}

fn predicted(p: &[f64; 2]) -> usize {
    usize::from(p[1] > p[0])
}

/// Accuracy, mean cross-entropy and confusion counts; parameters untouched.
pub fn evaluate(
    model: &Tacoformer,
    params: &ModelParams<Tensor>,
    set: &InstanceSet,
    exec: Execution,
    chunk: usize,
) -> Result<Metrics> {
    if set.is_empty() {
        return Err(contract("evaluating an empty dataset"));
    }
    let ranges = chunk_ranges(set.len(), chunk);
    let parts = par_map(exec, &ranges, |r| {
        let idx: Vec<usize> = r.clone().collect();
        let preds = model.predict(params, &set.eeg.gather_axis0(&idx)?, &set.pps.gather_axis0(&idx)?)?;
        Ok::<_, Error>(preds)
    });
    let mut confusion = [[0usize; 2]; 2];
    let mut loss = 0.0;
    let mut i = 0;
    for part in parts {
        for p in part? {
            let y = set.labels[i];
            confusion[y][p.class_id] += 1;
            loss += crate::model::cross_entropy(&p.probabilities, y)?.item();
            i += 1;
        }
    }
    let n = set.len();
    Ok(Metrics {
        n,
        accuracy: (confusion[0][0] + confusion[1][1]) as f64 / n as f64,
        mean_loss: loss / n as f64,
        confusion,
    })
}

/// Stateful training loop: parameters, optimizer state and the epoch counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Tacoformer,
    config: TrainConfig,
    params: ModelParams<Tensor>,
    adam: AdamState,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Tacoformer, config: TrainConfig) -> Result<Self> {
        let params = model.init_params(config.seed);
        Self::with_params(model, config, params)
    }

    pub fn with_params(model: Tacoformer, config: TrainConfig, params: ModelParams<Tensor>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: AdamState::new(&params),
            model,
            config,
            params,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Tacoformer {
        &self.model
    }

    pub fn params(&self) -> &ModelParams<Tensor> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<Tensor> {
        self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Batch order of `epoch`, a pure function of the seed and epoch number.
    fn order(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let seed = self.config.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx
    }

    /// One optimisation step on the given instances.
    pub fn step(&mut self, set: &InstanceSet, idx: &[usize]) -> Result<(f64, Vec<[f64; 2]>)> {
        let cfg = &self.config;
        let (loss, grads, probs) = batch_backprop(&self.model, &self.params, set, idx, cfg.execution, cfg.chunk_size)?;
        adam_step(&mut self.params, &grads, &mut self.adam, &cfg.adam())?;
        Ok((loss, probs))
    }

    pub fn run_epoch(&mut self, train: &InstanceSet, test: Option<&InstanceSet>) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(contract("training on an empty dataset"));
        }
        let order = self.order(train.len());
        let (mut loss, mut hits) = (0.0, 0usize);
        for batch in order.chunks(self.config.batch_size) {
            let (l, probs) = self.step(train, batch)?;
            loss += l * batch.len() as f64;
            hits += batch.iter().zip(&probs).filter(|(&i, p)| predicted(p) == train.labels[i]).count();
        }
        self.epoch += 1;
        let test_accuracy = match test {
            Some(t) => Some(evaluate(&self.model, &self.params, t, self.config.execution, self.config.chunk_size)?.accuracy),
            None => None,
        };
        Ok(EpochRecord {
            epoch: self.epoch,
            train_loss: loss / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            test_accuracy,
        })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<Tensor>,
    pub log: Vec<EpochRecord>,
}

/// Runs `config.epochs` epochs, writing one JSON line per epoch to `log`.
pub fn train(
    model: &Tacoformer,
    train_set: &InstanceSet,
    test_set: Option<&InstanceSet>,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model.clone(), config.clone())?;
    let mut records = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let rec = trainer.run_epoch(train_set, test_set)?;
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w).map_err(|e| Error::Io {
                path: "<training log>".into(),
                source: e,
            })?;
        }
        records.push(rec);
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        log: records,
    })
}
