//! End-to-end classifier: two temporal encoders, a fusion block, and a linear
//! head on the class token of the fused sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams, InputKind, TemporalEncoder};
use crate::encoding::PosEncMode;
use crate::error::{contract, Error, Result};
use crate::fusion::{fusion_block, init_fusion_params, FusionMode, FusionParams, FusionReport};
use crate::params::{join, uniform, zeros};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 2;

fn default_true() -> bool {
    true
}

fn default_classes() -> usize {
    NUM_CLASSES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub eeg: EncoderConfig,
    pub pps: EncoderConfig,
    #[serde(default)]
    pub fusion: FusionMode,
    /// Encoding of the EEG branch; the PPS branch always uses the 1-D table
    /// unless this is `none`.
    #[serde(default)]
    pub posenc: PosEncMode,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Start the classifier head at zero so initial predictions are uniform.
    #[serde(default = "default_true")]
    pub zero_init_classifier: bool,
}

impl ModelConfig {
    /// Model for `H x W x T` EEG grids and `K x T` peripheral channels.
    pub fn new(
        grid: (usize, usize),
        pps_channels: usize,
        timestamps: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
    ) -> Self {
        let enc = |input| EncoderConfig {
            d_model,
            heads,
            layers,
            timestamps,
            input,
            two_layer_ffn: false,
            ln_eps: LAYER_NORM_EPS,
        };
        Self {
            eeg: enc(InputKind::EegGrid {
                height: grid.0,
                width: grid.1,
            }),
            pps: enc(InputKind::PpsChannels {
                channels: pps_channels,
            }),
            fusion: FusionMode::Taco,
            posenc: PosEncMode::TwoD,
            classes: NUM_CLASSES,
            zero_init_classifier: true,
        }
    }

    /// Dataset-scale default: 9x9x128 EEG, 8 peripheral channels, d=64, h=4, L=2.
    pub fn deap_default() -> Self {
        Self::new((9, 9), 8, 128, 64, 4, 2)
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self::new((3, 3), 2, 8, 8, 2, 1)
    }

    pub fn with_fusion(mut self, mode: FusionMode) -> Self {
        self.fusion = mode;
        self
    }

    pub fn with_posenc(mut self, mode: PosEncMode) -> Self {
        self.posenc = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.eeg.validate()?;
        self.pps.validate()?;
        if !matches!(self.eeg.input, InputKind::EegGrid { .. })
            || !matches!(self.pps.input, InputKind::PpsChannels { .. })
        {
            return Err(Error::Config("eeg must be a grid and pps a channel input".into()));
        }
        if self.eeg.d_model != self.pps.d_model || self.eeg.timestamps != self.pps.timestamps {
            return Err(Error::Config(
                "both encoders must share d_model and timestamps for fusion".into(),
            ));
        }
        if self.classes != NUM_CLASSES {
            return Err(Error::Config(format!("only {NUM_CLASSES} classes are supported")));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.eeg.d_model
    }
}

/// Every learnable weight of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub eeg: EncoderParams<T>,
    pub pps: EncoderParams<T>,
    pub fusion: FusionParams<T>,
    pub classifier_w: T,
    pub classifier_b: T,
}

impl<T> ModelParams<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        ModelParams {
            eeg: self.eeg.map("eeg", f),
            pps: self.pps.map("pps", f),
            fusion: self.fusion.map("fusion", f),
            classifier_w: f(&join("classifier", "w"), &self.classifier_w),
            classifier_b: f(&join("classifier", "b"), &self.classifier_b),
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.eeg.visit_mut("eeg", f);
        self.pps.visit_mut("pps", f);
        self.fusion.visit_mut("fusion", f);
        f(&join("classifier", "w"), &mut self.classifier_w);
        f(&join("classifier", "b"), &mut self.classifier_b);
    }

    /// `(canonical name, leaf)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }
}

impl ModelParams<Tensor> {
    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelParams<Var<'t>> {
        self.map(&mut |_, t| tape.param(t.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |_, t| Tensor::zeros(t.shape().to_vec()).expect("shape"))
    }

    /// Adds `other` scaled by `s` into `self`, leaf by leaf.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        let others: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        self.visit_mut(&mut |_, t| {
            for (a, b) in t.data_mut().iter_mut().zip(others[i].data()) {
                *a += s * b;
            }
            i += 1;
        });
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a parameter set from named tensors, checking names and shapes
    /// against `template`.
    pub fn from_named(template: &Self, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut out = template.clone();
        let lookup: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if lookup.len() != template.named().len() {
            return Err(contract(format!(
                "expected {} parameter tensors, found {}",
                template.named().len(),
                lookup.len()
            )));
        }
        let mut err = None;
        out.visit_mut(&mut |name, t| match lookup.get(name) {
            Some(src) if src.shape() == t.shape() => *t = (*src).clone(),
            Some(src) => {
                err.get_or_insert(Error::Shape {
                    op: "load parameter",
                    lhs: t.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            None => {
                err.get_or_insert(contract(format!("missing parameter `{name}`")));
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

/// Class prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub class_id: usize,
}

/// Result of [`Tacoformer::backprop`].
#[derive(Clone, Debug)]
pub struct Backprop {
    /// Mean cross-entropy of the batch.
    pub loss: f64,
    pub grads: ModelParams<Tensor>,
    /// `[B, C]`.
    pub probabilities: Tensor,
}

/// Recorded forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass<'t> {
    /// `[B, C]`.
    pub logits: Var<'t>,
    /// `[B, C]`.
    pub probabilities: Var<'t>,
    /// `[B, n, n]` when the mode has a token map.
    pub token_attention: Option<Var<'t>>,
    /// `[B, d, d]` when the mode has a channel map.
    pub channel_attention: Option<Var<'t>>,
    /// Fusion operator output, `[B, n, d]`.
    pub fused: Var<'t>,
    /// Fusion block output, `[B, n, d]`.
    pub block_output: Var<'t>,
}

/// The assembled model: configuration plus precomputed encoder tables.
#[derive(Clone, Debug)]
pub struct Tacoformer {
    config: ModelConfig,
    eeg: TemporalEncoder,
    pps: TemporalEncoder,
}

impl Tacoformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let pps_posenc = match config.posenc {
            PosEncMode::None => PosEncMode::None,
            _ => PosEncMode::OneD,
        };
        Ok(Self {
            eeg: TemporalEncoder::new(config.eeg.clone(), config.posenc)?,
            pps: TemporalEncoder::new(config.pps.clone(), pps_posenc)?,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_params(&self, seed: u64) -> ModelParams<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model();
        let c = self.config.classes;
        let eeg = self.eeg.init_params(&mut rng);
        let pps = self.pps.init_params(&mut rng);
        let fusion = init_fusion_params(self.config.fusion, d, &mut rng);
        let classifier_w = if self.config.zero_init_classifier {
            zeros(&[d, c])
        } else {
            uniform(&mut rng, &[d, c], d)
        };
        ModelParams {
            eeg,
            pps,
            fusion,
            classifier_w,
            classifier_b: zeros(&[c]),
        }
    }

    /// Forward pass over `eeg: [B, H, W, T]`, `pps: [B, K, T]`.
    pub fn forward_batch<'t>(
        &self,
        tape: &'t Tape,
        params: &ModelParams<Var<'t>>,
        eeg: &Tensor,
        pps: &Tensor,
    ) -> Result<ForwardPass<'t>> {
        let b = eeg.shape().first().copied().unwrap_or(0);
        if pps.shape().first().copied() != Some(b) {
            return Err(Error::Shape {
                op: "forward batch",
                lhs: eeg.shape().to_vec(),
                rhs: pps.shape().to_vec(),
            });
        }
        let e = self.eeg.encode(tape, eeg, &params.eeg)?;
        let p = self.pps.encode(tape, pps, &params.pps)?;
        let (out, trace) = fusion_block(&e, &p, &params.fusion, self.config.fusion, self.config.eeg.ln_eps)?;
        let d = self.config.d_model();
        let cls = out.slice(1, 0, 1)?.reshape([b, d])?;
        let logits = cls.linear(&params.classifier_w, &params.classifier_b)?;
        let probabilities = logits.softmax_rows()?;
        Ok(ForwardPass {
            logits,
            probabilities,
            token_attention: trace.token,
            channel_attention: trace.channel,
            fused: trace.output,
            block_output: out,
        })
    }

    /// Mean cross-entropy of a batch, recorded on `tape`.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        params: &ModelParams<Var<'t>>,
        eeg: &Tensor,
        pps: &Tensor,
        labels: &[usize],
    ) -> Result<Var<'t>> {
        if labels.is_empty() {
            return Err(contract("batch loss of an empty batch"));
        }
        if eeg.shape()[0] != labels.len() {
            return Err(contract(format!(
                "{} labels for a batch of {}",
                labels.len(),
                eeg.shape()[0]
            )));
        }
        self.forward_batch(tape, params, eeg, pps)?
            .probabilities
            .nll_mean(labels)
    }

    /// Loss value and gradient of every parameter for one batch.
    pub fn loss_and_grad(
        &self,
        params: &ModelParams<Tensor>,
        eeg: &Tensor,
        pps: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, ModelParams<Tensor>)> {
        let out = self.backprop(params, eeg, pps, labels)?;
        Ok((out.loss, out.grads))
    }

    /// Forward and backward pass over one batch.
    pub fn backprop(
        &self,
        params: &ModelParams<Tensor>,
        eeg: &Tensor,
        pps: &Tensor,
        labels: &[usize],
    ) -> Result<Backprop> {
        if labels.is_empty() {
            return Err(contract("batch loss of an empty batch"));
        }
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let pass = self.forward_batch(&tape, &bound, eeg, pps)?;
        if labels.len() != pass.probabilities.shape()[0] {
            return Err(contract(format!(
                "{} labels for a batch of {}",
                labels.len(),
                pass.probabilities.shape()[0]
            )));
        }
        let loss = pass.probabilities.nll_mean(labels)?;
        tape.backward(loss)?;
        let grads = bound.map(&mut |_, v| {
            v.grad()
                .unwrap_or_else(|| Tensor::zeros(v.shape()).expect("shape"))
        });
        Ok(Backprop {
            loss: loss.value().item(),
            grads,
            probabilities: pass.probabilities.value(),
        })
    }

    /// Loss without gradients.
    pub fn loss(&self, params: &ModelParams<Tensor>, eeg: &Tensor, pps: &Tensor, labels: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let bound = params.map(&mut |_, t| tape.constant(t.clone()));
        Ok(self.batch_loss(&tape, &bound, eeg, pps, labels)?.value().item())
    }

    /// Predictions for a batch.
    pub fn predict(&self, params: &ModelParams<Tensor>, eeg: &Tensor, pps: &Tensor) -> Result<Vec<Prediction>> {
        let tape = Tape::new();
        let bound = params.map(&mut |_, t| tape.constant(t.clone()));
        let pass = self.forward_batch(&tape, &bound, eeg, pps)?;
        let (logits, probs) = (pass.logits.value(), pass.probabilities.value());
        let c = self.config.classes;
        (0..logits.shape()[0])
            .map(|i| {
                let l = Tensor::new([c], logits.data()[i * c..(i + 1) * c].to_vec())?;
                let p = Tensor::new([c], probs.data()[i * c..(i + 1) * c].to_vec())?;
                Ok(Prediction {
                    class_id: p.argmax(),
                    logits: l,
                    probabilities: p,
                })
            })
            .collect()
    }

    /// Prediction for one `H x W x T` EEG sample and its `K x T` peripheral sample.
    pub fn forward(&self, params: &ModelParams<Tensor>, x_eeg: &Tensor, x_pps: &Tensor) -> Result<Prediction> {
        let eeg = Tensor::stack(std::slice::from_ref(x_eeg))?;
        let pps = Tensor::stack(std::slice::from_ref(x_pps))?;
        Ok(self.predict(params, &eeg, &pps)?.remove(0))
    }

    /// Attention maps of the fusion block for one sample.
    pub fn fusion_report(
        &self,
        params: &ModelParams<Tensor>,
        x_eeg: &Tensor,
        x_pps: &Tensor,
        label: usize,
    ) -> Result<FusionReport> {
        let eeg = Tensor::stack(std::slice::from_ref(x_eeg))?;
        let pps = Tensor::stack(std::slice::from_ref(x_pps))?;
        let tape = Tape::new();
        let bound = params.map(&mut |_, t| tape.constant(t.clone()));
        let pass = self.forward_batch(&tape, &bound, &eeg, &pps)?;
        let first = |v: Var<'_>| v.value().index_axis0(0);
        Ok(FusionReport {
            mode: self.config.fusion,
            token_attention: pass.token_attention.map(first).transpose()?,
            channel_attention: pass.channel_attention.map(first).transpose()?,
            fused_output: first(pass.fused)?,
            label,
        })
    }
}

/// `-ln(max(p[label], 1e-12))` as a 1-element tensor.
pub fn cross_entropy(probabilities: &Tensor, label: usize) -> Result<Tensor> {
    if probabilities.rank() != 1 {
        return Err(contract("cross entropy expects a probability vector"));
    }
    let tape = Tape::new();
    let p = tape.constant(probabilities.reshape([1, probabilities.len()])?);
    Ok(p.nll_mean(&[label])?.value())
}

/// Fraction of predictions whose class matches the label.
pub fn accuracy(predictions: &[Prediction], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(contract(format!(
            "accuracy needs equal non-empty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.class_id == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
