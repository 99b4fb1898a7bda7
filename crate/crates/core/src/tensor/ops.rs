//! Gradient-free entry points to the tape operations, for callers holding plain tensors.
//!
//! Each function records onto a throwaway tape, so results are computed by the
//! exact code path used during training.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(tape.constant(a.clone()).matmul(&tape.constant(b.clone()))?.value())
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(tape.constant(x.clone()).softmax_rows()?.value())
}

pub fn softmax_cols(x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(tape.constant(x.clone()).softmax_cols()?.value())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let out = tape.constant(x.clone()).layer_norm(
        &tape.constant(gain.clone()),
        &tape.constant(bias.clone()),
        eps,
    )?;
    Ok(out.value())
}

pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let out = tape
        .constant(x.clone())
        .linear(&tape.constant(w.clone()), &tape.constant(b.clone()))?;
    Ok(out.value())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(tape.constant(a.clone()).add(&tape.constant(b.clone()))?.value())
}

pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = parts.iter().map(|p| tape.constant(p.clone())).collect();
    Ok(Var::concat(&vars, axis)?.value())
}
