//! Per-modality transformer encoder.
//!
//! The input is moved to time-major order, position-encoded, flattened per
//! timestamp and projected to the model width. A learnable class token is
//! prepended and the sequence is layer-normalised before `layers` blocks of
//!
//! ```text
//! res = z + MultiHead(z)
//! out = res + FFN(LayerNorm(res))
//! ```
//!
//! Every head scales its logits by `1/sqrt(d_model)`, not by the head width.
//! All tensors carry a leading batch axis.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{posenc_1d, posenc_2d, Encoding, PosEnc1D, PosEnc2D, PosEncMode};
use crate::error::{contract, Error, Result};
use crate::params::{join, ones, uniform, zeros};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Tape, Tensor, Var};

fn default_eps() -> f64 {
    LAYER_NORM_EPS
}

/// Layout of one modality's raw input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    /// `H x W x T` electrode grid.
    EegGrid { height: usize, width: usize },
    /// `K x T` channels.
    PpsChannels { channels: usize },
}

impl InputKind {
    /// Values per timestamp after flattening.
    pub fn features(&self) -> usize {
        match *self {
            Self::EegGrid { height, width } => height * width,
            Self::PpsChannels { channels } => channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub timestamps: usize,
    pub input: InputKind,
    /// Replace the single linear FFN with `d -> 2d -> d` and a ReLU.
    #[serde(default)]
    pub two_layer_ffn: bool,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.d_model, self.heads, self.timestamps, self.input.features()];
        if counts.contains(&0) {
            return Err(Error::Config(format!("encoder counts must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.heads
    }

    /// Logit scale shared by every head.
    pub fn attention_scale(&self) -> f64 {
        1.0 / (self.d_model as f64).sqrt()
    }

    /// Shape of one unbatched input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.input {
            InputKind::EegGrid { height, width } => vec![height, width, self.timestamps],
            InputKind::PpsChannels { channels } => vec![channels, self.timestamps],
        }
    }
}

/// Weights of one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub ln_gain: T,
    pub ln_bias: T,
    pub ffn_w: T,
    pub ffn_b: T,
    /// Second FFN layer, present only with `two_layer_ffn`.
    pub ffn_w2: Option<T>,
    pub ffn_b2: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub proj_w: T,
    pub proj_b: T,
    pub cls: T,
    pub ln_gain: T,
    pub ln_bias: T,
    pub layers: Vec<LayerParams<T>>,
}

impl<T> LayerParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> LayerParams<U> {
        let mut g = |name: &str, v: &'a T| f(&join(prefix, name), v);
        LayerParams {
            w_q: g("w_q", &self.w_q),
            w_k: g("w_k", &self.w_k),
            w_v: g("w_v", &self.w_v),
            w_o: g("w_o", &self.w_o),
            ln_gain: g("ln_gain", &self.ln_gain),
            ln_bias: g("ln_bias", &self.ln_bias),
            ffn_w: g("ffn_w", &self.ffn_w),
            ffn_b: g("ffn_b", &self.ffn_b),
            ffn_w2: self.ffn_w2.as_ref().map(|v| g("ffn_w2", v)),
            ffn_b2: self.ffn_b2.as_ref().map(|v| g("ffn_b2", v)),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        let mut g = |name: &str, v: &mut T| f(&join(prefix, name), v);
        g("w_q", &mut self.w_q);
        g("w_k", &mut self.w_k);
        g("w_v", &mut self.w_v);
        g("w_o", &mut self.w_o);
        g("ln_gain", &mut self.ln_gain);
        g("ln_bias", &mut self.ln_bias);
        g("ffn_w", &mut self.ffn_w);
        g("ffn_b", &mut self.ffn_b);
        if let Some(v) = self.ffn_w2.as_mut() {
            g("ffn_w2", v);
        }
        if let Some(v) = self.ffn_b2.as_mut() {
            g("ffn_b2", v);
        }
    }
}

impl<T> EncoderParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> EncoderParams<U> {
        EncoderParams {
            proj_w: f(&join(prefix, "proj_w"), &self.proj_w),
            proj_b: f(&join(prefix, "proj_b"), &self.proj_b),
            cls: f(&join(prefix, "cls"), &self.cls),
            ln_gain: f(&join(prefix, "ln_gain"), &self.ln_gain),
            ln_bias: f(&join(prefix, "ln_bias"), &self.ln_bias),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&join(prefix, &format!("layer{i}")), f))
                .collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&join(prefix, "proj_w"), &mut self.proj_w);
        f(&join(prefix, "proj_b"), &mut self.proj_b);
        f(&join(prefix, "cls"), &mut self.cls);
        f(&join(prefix, "ln_gain"), &mut self.ln_gain);
        f(&join(prefix, "ln_bias"), &mut self.ln_bias);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Residual branch `res + FFN(LayerNorm(res))` shared with the fusion block.
pub(crate) fn norm_ffn_residual<'t>(
    res: &Var<'t>,
    ln_gain: &Var<'t>,
    ln_bias: &Var<'t>,
    ffn: (&Var<'t>, &Var<'t>, Option<(&Var<'t>, &Var<'t>)>),
    eps: f64,
) -> Result<Var<'t>> {
    let normed = res.layer_norm(ln_gain, ln_bias, eps)?;
    let (w, b, second) = ffn;
    let hidden = normed.linear(w, b)?;
    let out = match second {
        Some((w2, b2)) => hidden.relu().linear(w2, b2)?,
        None => hidden,
    };
    res.add(&out)
}

/// Multi-head self-attention over `[B, n, d]`, also returning each head's `[B, n, n]` map.
pub fn attention_with_maps<'t>(
    z: &Var<'t>,
    layer: &LayerParams<Var<'t>>,
    cfg: &EncoderConfig,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let shape = z.shape();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(Error::Shape {
            op: "attention",
            lhs: shape,
            rhs: vec![cfg.d_model],
        });
    }
    let scale = cfg.attention_scale();
    debug_assert_eq!(scale, 1.0 / (cfg.d_model as f64).sqrt());
    let q = z.matmul(&layer.w_q)?;
    let k = z.matmul(&layer.w_k)?;
    let v = z.matmul(&layer.w_v)?;
    let hw = cfg.head_width();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = q.slice(2, h * hw, hw)?;
        let kh = k.slice(2, h * hw, hw)?;
        let vh = v.slice(2, h * hw, hw)?;
        let m = qh.matmul_nt(&kh)?.scale(scale).softmax_rows()?;
        heads.push(m.matmul(&vh)?);
        maps.push(m);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        Var::concat(&heads, 2)?
    };
    Ok((joined.matmul(&layer.w_o)?, maps))
}

pub fn attention<'t>(z: &Var<'t>, layer: &LayerParams<Var<'t>>, cfg: &EncoderConfig) -> Result<Var<'t>> {
    Ok(attention_with_maps(z, layer, cfg)?.0)
}

pub fn encoder_layer<'t>(z: &Var<'t>, layer: &LayerParams<Var<'t>>, cfg: &EncoderConfig) -> Result<Var<'t>> {
    let res = z.add(&attention(z, layer, cfg)?)?;
    let second = layer.ffn_w2.as_ref().zip(layer.ffn_b2.as_ref());
    norm_ffn_residual(
        &res,
        &layer.ln_gain,
        &layer.ln_bias,
        (&layer.ffn_w, &layer.ffn_b, second),
        cfg.ln_eps,
    )
}

/// One modality's encoder with its position tables precomputed.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    config: EncoderConfig,
    posenc: PosEncMode,
    pos2d: Option<PosEnc2D>,
    pos1d: Option<PosEnc1D>,
}

impl TemporalEncoder {
    /// `posenc` selects the table; a 2-D request on a channel input is an error.
    pub fn new(config: EncoderConfig, posenc: PosEncMode) -> Result<Self> {
        config.validate()?;
        let (pos2d, pos1d) = match (posenc, config.input) {
            (PosEncMode::TwoD, InputKind::EegGrid { height, width }) => {
                (Some(posenc_2d(config.timestamps, height, width)?), None)
            }
            (PosEncMode::TwoD, InputKind::PpsChannels { .. }) => {
                return Err(Error::Config(
                    "2-D position encoding needs an electrode grid input".into(),
                ))
            }
            (PosEncMode::OneD, _) => (None, Some(posenc_1d(config.timestamps, config.d_model)?)),
            (PosEncMode::None, _) => (None, None),
        };
        Ok(Self {
            config,
            posenc,
            pos2d,
            pos1d,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn posenc(&self) -> PosEncMode {
        self.posenc
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> EncoderParams<Tensor> {
        let d = self.config.d_model;
        let f = self.config.input.features();
        let layers = (0..self.config.layers)
            .map(|_| {
                let two = self.config.two_layer_ffn;
                let hidden = if two { 2 * d } else { d };
                LayerParams {
                    w_q: uniform(rng, &[d, d], d),
                    w_k: uniform(rng, &[d, d], d),
                    w_v: uniform(rng, &[d, d], d),
                    w_o: uniform(rng, &[d, d], d),
                    ln_gain: ones(&[d]),
                    ln_bias: zeros(&[d]),
                    ffn_w: uniform(rng, &[d, hidden], d),
                    ffn_b: zeros(&[hidden]),
                    ffn_w2: two.then(|| uniform(rng, &[hidden, d], hidden)),
                    ffn_b2: two.then(|| zeros(&[d])),
                }
            })
            .collect();
        EncoderParams {
            proj_w: uniform(rng, &[f, d], f),
            proj_b: zeros(&[d]),
            cls: zeros(&[1, d]),
            ln_gain: ones(&[d]),
            ln_bias: zeros(&[d]),
            layers,
        }
    }

    /// Time-major `[B, T, features]` input with the 2-D table (if any) added.
    pub fn prepare_input(&self, x: &Tensor) -> Result<Tensor> {
        let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
        expected.extend(self.config.sample_shape());
        if x.shape() != expected.as_slice() {
            return Err(Error::Shape {
                op: "encoder input",
                lhs: x.shape().to_vec(),
                rhs: expected,
            });
        }
        let b = expected[0];
        let t = self.config.timestamps;
        let f = self.config.input.features();
        match self.config.input {
            InputKind::EegGrid { .. } => {
                let time_major = x.permute(&[0, 3, 1, 2])?;
                let time_major = match &self.pos2d {
                    Some(p) => crate::encoding::apply_posenc(&time_major, p)?,
                    None => time_major,
                };
                time_major.reshape([b, t, f])
            }
            InputKind::PpsChannels { .. } => x.permute(&[0, 2, 1]),
        }
    }

    /// `LayerNorm(concat(CLS, projected input))` of shape `[B, T + 1, d]`.
    pub fn embed<'t>(&self, tape: &'t Tape, x: &Tensor, p: &EncoderParams<Var<'t>>) -> Result<Var<'t>> {
        let prepared = self.prepare_input(x)?;
        let b = prepared.shape()[0];
        let mut z = tape.constant(prepared).linear(&p.proj_w, &p.proj_b)?;
        if let Some(p1) = &self.pos1d {
            z = z.add(&tape.constant(p1.table().clone()))?;
        }
        let cls = p.cls.expand_batch(b)?;
        Var::concat(&[cls, z], 1)?.layer_norm(&p.ln_gain, &p.ln_bias, self.config.ln_eps)
    }

    pub fn encode<'t>(&self, tape: &'t Tape, x: &Tensor, p: &EncoderParams<Var<'t>>) -> Result<Var<'t>> {
        if p.layers.len() != self.config.layers {
            return Err(contract(format!(
                "encoder has {} layers but {} parameter sets",
                self.config.layers,
                p.layers.len()
            )));
        }
        let mut z = self.embed(tape, x, p)?;
        for layer in &p.layers {
            z = encoder_layer(&z, layer, &self.config)?;
        }
        Ok(z)
    }
}

/// Binds stored encoder weights to a tape as trainable leaves.
pub fn bind_encoder<'t>(tape: &'t Tape, p: &EncoderParams<Tensor>) -> EncoderParams<Var<'t>> {
    p.map("", &mut |_, t| tape.param(t.clone()))
}
