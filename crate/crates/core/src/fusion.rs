//! Cross-modal fusion of the EEG sequence `E` and the peripheral sequence `P`.
//!
//! Both inputs are `[B, n, d]`. With `Q_E = E W_qe`, `K_E = E W_ke`,
//! `V_E = E W_ve`, `Q_P = P W_qp` and `K_P = P W_kp`:
//!
//! ```text
//! token   = softmax_rows(Q_P K_Eᵀ / sqrt(d))          [n x n]
//! channel = softmax_cols(Q_Eᵀ K_P / sqrt(n))          [d x d]
//! TCA  = token · V_E
//! CCA  = V_E · channel
//! TACO = token · V_E · channel
//! ```
//!
//! `n` counts the class token. No value projection is ever taken from `P`.
//! The block output is `res + FFN(LayerNorm(res))` with `res = fusion + E`.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::norm_ffn_residual;
use crate::error::{io_err, Error, Result};
use crate::params::{join, ones, uniform, zeros};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Taco,
    Tca,
    Cca,
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [Self::Concat, Self::Tca, Self::Cca, Self::Taco];

    pub fn name(self) -> &'static str {
        match self {
            Self::Taco => "taco",
            Self::Tca => "tca",
            Self::Cca => "cca",
            Self::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taco" => Ok(Self::Taco),
            "tca" => Ok(Self::Tca),
            "cca" => Ok(Self::Cca),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Fusion weights. Only the projections a mode uses are present.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub w_q_e: Option<T>,
    pub w_k_e: Option<T>,
    pub w_v_e: Option<T>,
    pub w_q_p: Option<T>,
    pub w_k_p: Option<T>,
    /// `2d x d` projection of the concatenated sequences.
    pub concat_w: Option<T>,
    pub concat_b: Option<T>,
    pub ln_gain: T,
    pub ln_bias: T,
    pub ffn_w: T,
    pub ffn_b: T,
}

impl<T> FusionParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> FusionParams<U> {
        let mut opt = |name: &str, v: &'a Option<T>| v.as_ref().map(|v| f(&join(prefix, name), v));
        let w_q_e = opt("w_q_e", &self.w_q_e);
        let w_k_e = opt("w_k_e", &self.w_k_e);
        let w_v_e = opt("w_v_e", &self.w_v_e);
        let w_q_p = opt("w_q_p", &self.w_q_p);
        let w_k_p = opt("w_k_p", &self.w_k_p);
        let concat_w = opt("concat_w", &self.concat_w);
        let concat_b = opt("concat_b", &self.concat_b);
        FusionParams {
            w_q_e,
            w_k_e,
            w_v_e,
            w_q_p,
            w_k_p,
            concat_w,
            concat_b,
            ln_gain: f(&join(prefix, "ln_gain"), &self.ln_gain),
            ln_bias: f(&join(prefix, "ln_bias"), &self.ln_bias),
            ffn_w: f(&join(prefix, "ffn_w"), &self.ffn_w),
            ffn_b: f(&join(prefix, "ffn_b"), &self.ffn_b),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        let slots = [
            ("w_q_e", &mut self.w_q_e),
            ("w_k_e", &mut self.w_k_e),
            ("w_v_e", &mut self.w_v_e),
            ("w_q_p", &mut self.w_q_p),
            ("w_k_p", &mut self.w_k_p),
            ("concat_w", &mut self.concat_w),
            ("concat_b", &mut self.concat_b),
        ];
        for (name, slot) in slots {
            if let Some(v) = slot.as_mut() {
                f(&join(prefix, name), v);
            }
        }
        f(&join(prefix, "ln_gain"), &mut self.ln_gain);
        f(&join(prefix, "ln_bias"), &mut self.ln_bias);
        f(&join(prefix, "ffn_w"), &mut self.ffn_w);
        f(&join(prefix, "ffn_b"), &mut self.ffn_b);
    }
}

pub fn init_fusion_params(mode: FusionMode, d: usize, rng: &mut ChaCha8Rng) -> FusionParams<Tensor> {
    let uses = |m: &[FusionMode]| m.contains(&mode);
    use FusionMode::*;
    let mut proj = |on: bool| on.then(|| uniform(rng, &[d, d], d));
    let w_q_e = proj(uses(&[Taco, Cca]));
    let w_k_e = proj(uses(&[Taco, Tca]));
    let w_v_e = proj(uses(&[Taco, Tca, Cca]));
    let w_q_p = proj(uses(&[Taco, Tca]));
    let w_k_p = proj(uses(&[Taco, Cca]));
    let concat_w = (mode == Concat).then(|| uniform(rng, &[2 * d, d], 2 * d));
    FusionParams {
        w_q_e,
        w_k_e,
        w_v_e,
        w_q_p,
        w_k_p,
        concat_w,
        concat_b: (mode == Concat).then(|| zeros(&[d])),
        ln_gain: ones(&[d]),
        ln_bias: zeros(&[d]),
        ffn_w: uniform(rng, &[d, d], d),
        ffn_b: zeros(&[d]),
    }
}

/// Result of a fusion operator with the attention maps it produced.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace<'t> {
    pub output: Var<'t>,
    /// `[B, n, n]`, row-stochastic.
    pub token: Option<Var<'t>>,
    /// `[B, d, d]`, column-stochastic.
    pub channel: Option<Var<'t>>,
}

fn need<'a, 't>(p: &'a Option<Var<'t>>, name: &str, mode: &str) -> Result<&'a Var<'t>> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("{mode} fusion needs parameter `{name}`")))
}

fn check_pair(e: &Var<'_>, p: &Var<'_>) -> Result<(usize, usize)> {
    let (se, sp) = (e.shape(), p.shape());
    if se != sp || se.len() != 3 {
        return Err(Error::Shape {
            op: "fusion",
            lhs: se,
            rhs: sp,
        });
    }
    Ok((se[1], se[2]))
}

/// `softmax_rows(Q_P K_Eᵀ / sqrt(d))`.
pub fn token_matrix<'t>(e: &Var<'t>, p: &Var<'t>, params: &FusionParams<Var<'t>>) -> Result<Var<'t>> {
    let (_, d) = check_pair(e, p)?;
    let q_p = p.matmul(need(&params.w_q_p, "w_q_p", "token")?)?;
    let k_e = e.matmul(need(&params.w_k_e, "w_k_e", "token")?)?;
    q_p.matmul_nt(&k_e)?.scale(1.0 / (d as f64).sqrt()).softmax_rows()
}

/// `softmax_cols(Q_Eᵀ K_P / sqrt(n))`.
pub fn channel_matrix<'t>(e: &Var<'t>, p: &Var<'t>, params: &FusionParams<Var<'t>>) -> Result<Var<'t>> {
    let (n, _) = check_pair(e, p)?;
    let q_e = e.matmul(need(&params.w_q_e, "w_q_e", "channel")?)?;
    let k_p = p.matmul(need(&params.w_k_p, "w_k_p", "channel")?)?;
    q_e.matmul_tn(&k_p)?.scale(1.0 / (n as f64).sqrt()).softmax_cols()
}

fn value_e<'t>(e: &Var<'t>, params: &FusionParams<Var<'t>>) -> Result<Var<'t>> {
    e.matmul(need(&params.w_v_e, "w_v_e", "value")?)
}

/// Token-wise cross attention: `token · V_E`.
pub fn tca<'t>(e: &Var<'t>, p: &Var<'t>, params: &FusionParams<Var<'t>>) -> Result<FusionTrace<'t>> {
    let token = token_matrix(e, p, params)?;
    Ok(FusionTrace {
        output: token.matmul(&value_e(e, params)?)?,
        token: Some(token),
        channel: None,
    })
}

/// Channel-wise cross attention: `V_E · channel`.
pub fn cca<'t>(e: &Var<'t>, p: &Var<'t>, params: &FusionParams<Var<'t>>) -> Result<FusionTrace<'t>> {
    let channel = channel_matrix(e, p, params)?;
    Ok(FusionTrace {
        output: value_e(e, params)?.matmul(&channel)?,
        token: None,
        channel: Some(channel),
    })
}

/// Token-channel compound attention: `token · V_E · channel`.
pub fn taco<'t>(e: &Var<'t>, p: &Var<'t>, params: &FusionParams<Var<'t>>) -> Result<FusionTrace<'t>> {
    let token = token_matrix(e, p, params)?;
    let channel = channel_matrix(e, p, params)?;
    let output = token.matmul(&value_e(e, params)?)?.matmul(&channel)?;
    Ok(FusionTrace {
        output,
        token: Some(token),
        channel: Some(channel),
    })
}

/// `concat(E, P) · W + b`, projected back to width `d`.
pub fn concat_fusion<'t>(e: &Var<'t>, p: &Var<'t>, params: &FusionParams<Var<'t>>) -> Result<FusionTrace<'t>> {
    check_pair(e, p)?;
    let joined = Var::concat(&[*e, *p], 2)?;
    let output = joined.linear(
        need(&params.concat_w, "concat_w", "concat")?,
        need(&params.concat_b, "concat_b", "concat")?,
    )?;
    Ok(FusionTrace {
        output,
        token: None,
        channel: None,
    })
}

pub fn fuse<'t>(
    e: &Var<'t>,
    p: &Var<'t>,
    params: &FusionParams<Var<'t>>,
    mode: FusionMode,
) -> Result<FusionTrace<'t>> {
    match mode {
        FusionMode::Taco => taco(e, p, params),
        FusionMode::Tca => tca(e, p, params),
        FusionMode::Cca => cca(e, p, params),
        FusionMode::Concat => concat_fusion(e, p, params),
    }
}

/// Residual fusion block. The returned trace's `output` is the block output;
/// the maps are those of the fusion operator.
pub fn fusion_block<'t>(
    e: &Var<'t>,
    p: &Var<'t>,
    params: &FusionParams<Var<'t>>,
    mode: FusionMode,
    ln_eps: f64,
) -> Result<(Var<'t>, FusionTrace<'t>)> {
    let trace = fuse(e, p, params, mode)?;
    let res = trace.output.add(e)?;
    let out = norm_ffn_residual(
        &res,
        &params.ln_gain,
        &params.ln_bias,
        (&params.ffn_w, &params.ffn_b, None),
        ln_eps,
    )?;
    Ok((out, trace))
}

/// Attention maps of one sample, ready for export.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub mode: FusionMode,
    /// `n x n`, rows sum to one.
    pub token_attention: Option<Tensor>,
    /// `d x d`, columns sum to one.
    pub channel_attention: Option<Tensor>,
    /// Output of the fusion operator before the residual, `n x d`.
    pub fused_output: Tensor,
    pub label: usize,
}

impl FusionReport {
    /// `(name, matrix)` pairs present in this report.
    pub fn matrices(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = &self.token_attention {
            out.push(("token", t));
        }
        if let Some(c) = &self.channel_attention {
            out.push(("channel", c));
        }
        out.push(("fused", &self.fused_output));
        out
    }
}

/// Writes a matrix as comma-separated rows with round-trip float formatting.
pub fn write_csv(m: &Tensor, path: &Path) -> Result<()> {
    let (rows, cols) = matrix_dims(m)?;
    let mut text = String::with_capacity(rows * cols * 20);
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| format!("{:?}", m.data()[r * cols + c])).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| malformed(format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Tensor::from_rows(&rows).map_err(|e| malformed(e.to_string()))
}

/// Min-max scales a matrix to 8-bit grey levels; a constant matrix maps to all zeros.
pub fn to_gray(m: &Tensor) -> Result<Vec<u8>> {
    matrix_dims(m)?;
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(m.data()
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect())
}

/// Binary portable graymap (`P5`) of a matrix.
pub fn write_pgm(m: &Tensor, path: &Path) -> Result<()> {
    let (rows, cols) = matrix_dims(m)?;
    let pixels = to_gray(m)?;
    let mut buf = Vec::with_capacity(pixels.len() + 32);
    write!(buf, "P5\n{cols} {rows}\n255\n").expect("write to vec");
    buf.extend_from_slice(&pixels);
    std::fs::write(path, buf).map_err(io_err(path))
}

fn matrix_dims(m: &Tensor) -> Result<(usize, usize)> {
    match m.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::InvalidShape {
            shape: other.to_vec(),
            reason: "expected a matrix".into(),
        }),
    }
}

/// File stem `attn_{mode}_{matrix}_{V0|V1}`.
pub fn attention_file_stem(mode: FusionMode, matrix: &str, label: usize) -> String {
    format!("attn_{}_{}_V{}", mode.name(), matrix, label)
}

/// Writes every matrix of the report as CSV and PGM into `dir`; returns the paths written.
pub fn export_attention(report: &FusionReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (name, m) in report.matrices() {
        let stem = attention_file_stem(report.mode, name, report.label);
        let csv = dir.join(format!("{stem}.csv"));
        write_csv(m, &csv)?;
        let pgm = dir.join(format!("{stem}.pgm"));
        write_pgm(m, &pgm)?;
        written.push(csv);
        written.push(pgm);
    }
    Ok(written)
}
