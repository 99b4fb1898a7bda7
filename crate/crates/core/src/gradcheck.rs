//! Central finite-difference check of the analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::FusionMode;
use crate::model::{ModelConfig, ModelParams, Tacoformer};
use crate::tensor::Tensor;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SAMPLES: usize = 32;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error <= tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn with_coord(params: &mut ModelParams<Tensor>, leaf: usize, coord: usize, f: impl FnOnce(&mut f64)) {
    let mut i = 0;
    let mut f = Some(f);
    params.visit_mut(&mut |_, t| {
        if i == leaf {
            (f.take().expect("visited once"))(&mut t.data_mut()[coord]);
        }
        i += 1;
    });
}

/// Compares backprop against central differences on up to `samples`
/// coordinates of every parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    model: &Tacoformer,
    params: &ModelParams<Tensor>,
    eeg: &Tensor,
    pps: &Tensor,
    labels: &[usize],
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradReport> {
    let (_, grads) = model.loss_and_grad(params, eeg, pps, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut tensors = Vec::new();
    for (leaf, (name, g)) in grads.named().into_iter().enumerate() {
        let coords = sample(&mut rng, g.len(), samples.min(g.len())).into_vec();
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = params.named()[leaf].1.data()[c];
            with_coord(&mut work, leaf, c, |v| *v = orig + step);
            let up = model.loss(&work, eeg, pps, labels)?;
            with_coord(&mut work, leaf, c, |v| *v = orig - step);
            let down = model.loss(&work, eeg, pps, labels)?;
            with_coord(&mut work, leaf, c, |v| *v = orig);
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(g.data()[c], numeric));
        }
        tensors.push(TensorCheck {
            name,
            checked: coords.len(),
            max_rel_error: worst,
            max_abs_grad: g.data().iter().fold(0.0, |m, v| m.max(v.abs())),
        });
    }
    Ok(GradReport { tensors })
}

/// Runs the check on the tiny configuration with random weights and inputs,
/// on up to `samples` coordinates per tensor (`usize::MAX` checks them all).
pub fn tiny_check(mode: FusionMode, seed: u64, samples: usize) -> Result<GradReport> {
    let mut cfg = ModelConfig::tiny().with_fusion(mode);
    cfg.zero_init_classifier = false;
    let model = Tacoformer::new(cfg)?;
    let mut params = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // A zero class token makes its pre-norm row constant, which puts the
    // check right on the LayerNorm variance floor. Move off it.
    for cls in [&mut params.eeg.cls, &mut params.pps.cls] {
        cls.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let batch = 4;
    let mut rand = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let eeg = rand(vec![batch, 3, 3, 8])?;
    let pps = rand(vec![batch, 2, 8])?;
    let labels = [0, 1, 1, 0];
    finite_diff_check(&model, &params, &eeg, &pps, &labels, DEFAULT_STEP, samples, seed)
}
