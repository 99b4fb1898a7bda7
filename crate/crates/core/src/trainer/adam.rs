//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0 && self.eps > 0.0 && unit(self.beta1) && unit(self.beta2)) {
            return Err(Error::Config(format!(
                "Adam needs a positive rate and eps and betas in (0, 1), got {self:?}"
            )));
        }
        Ok(())
    }
}

/// First and second moments of every parameter tensor in canonical order,
/// plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<Tensor>) -> Self {
        let zeros: Vec<Tensor> = params
            .named()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()).expect("shape"))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One update of a flat parameter slice; `step` is the 1-based step index.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        theta[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every parameter. Non-finite gradients abort the
/// step before anything is modified.
pub fn adam_step(
    params: &mut ModelParams<Tensor>,
    grads: &ModelParams<Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let grads = grads.named();
    if grads.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} tensors, got {} gradients",
            state.m.len(),
            grads.len()
        )));
    }
    for (name, g) in &grads {
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: name.clone(),
                index,
            });
        }
    }
    state.step += 1;
    let step = state.step;
    let mut i = 0;
    let mut shape_err = None;
    params.visit_mut(&mut |name, theta| {
        let g = grads[i].1;
        if g.shape() != theta.shape() || state.m[i].shape() != theta.shape() {
            shape_err.get_or_insert_with(|| Error::Contract(format!("gradient shape mismatch for `{name}`")));
        } else {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            adam_update(theta.data_mut(), g.data(), m.data_mut(), v.data_mut(), step, cfg);
        }
        i += 1;
    });
    shape_err.map_or(Ok(()), Err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Tacoformer};

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_the_rate() {
        let mut theta = [0.5, -2.0, 3.0];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        adam_update(&mut theta, &[1.0; 3], &mut m, &mut v, 1, &cfg(0.01));
        let want = [0.5 - 0.01, -2.0 - 0.01, 3.0 - 0.01];
        for (a, b) in theta.iter().zip(want) {
            // m_hat = v_hat = 1, so the step is lr / (1 + eps)
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn quadratic_converges_like_the_reference_recursion() {
        let c = cfg(0.1);
        let mut theta = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        // independent scalar recursion
        let (mut t, mut mm, mut vv) = (1.0f64, 0.0f64, 0.0f64);
        for step in 1..=100u64 {
            let g = 2.0 * theta[0];
            adam_update(&mut theta, &[g], &mut m, &mut v, step, &c);
            let g = 2.0 * t;
            mm = 0.9 * mm + 0.1 * g;
            vv = 0.999 * vv + 0.001 * g * g;
            let mh = mm / (1.0 - 0.9f64.powi(step as i32));
            let vh = vv / (1.0 - 0.999f64.powi(step as i32));
            t -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((theta[0] - t).abs() <= 1e-12);
        assert!(theta[0].abs() < 0.05, "{}", theta[0]);
    }

    #[test]
    fn zero_gradient_is_identity_and_nan_is_named() {
        let model = Tacoformer::new(ModelConfig::tiny()).unwrap();
        let mut params = model.init_params(1);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let zero = params.zeros_like();
        adam_step(&mut params, &zero, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);

        let mut grads = params.zeros_like();
        grads.fusion.ffn_b.data_mut()[2] = f64::NAN;
        let err = adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("fusion.ffn_b"), "{err}");
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn validates_config() {
        assert!(AdamConfig::default().validate().is_ok());
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(cfg(0.0).validate().is_err());
    }
}
