//! Helpers shared by the parameter trees of the encoder, fusion block and model.
//!
//! Parameter structs are generic over their leaf type so one definition serves
//! for stored weights (`Tensor`), weights bound to a tape (`Var`), gradients and
//! optimizer moments. Traversal order is the canonical order used for
//! checkpoints and gradient reduction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub(crate) fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec()).expect("init shape")
}

pub(crate) fn ones(shape: &[usize]) -> Tensor {
    Tensor::ones(shape.to_vec()).expect("init shape")
}
