use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u32,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(
    name: &str,
    param: &mut [f32],
    grad: &[f32],
    state: &mut AdamMoments,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape("adam_step", &[param.len()], &[grad.len()]));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training {
            param: name.to_string(),
            reason: format!("non-finite gradient at index {i}"),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`], keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<String, AdamMoments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Applies `grads` (missing entries are treated as zero).
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get_mut(&name)?;
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| AdamMoments::zeros(p.len()));
            adam_step(&name, p.data_mut(), g.data(), st, &self.config)?;
        }
        Ok(())
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamMoments::zeros(2);
        adam_step("w", &mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0];
        let mut st = AdamMoments::zeros(1);
        adam_step("w", &mut p, &[1.0], &mut st, &cfg).unwrap();
        let (m1, v1) = (st.m[0], st.v[0]);
        adam_step("w", &mut p, &[0.0], &mut st, &cfg).unwrap();
        assert_eq!(st.m[0], cfg.beta1 * m1);
        assert_eq!(st.v[0], cfg.beta2 * v1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + ε).
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = vec![0.0];
        let mut st = AdamMoments::zeros(1);
        adam_step("w", &mut p, &[1.0], &mut st, &cfg).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut p = vec![0.0, 0.0];
        let mut st = AdamMoments::zeros(2);
        let mut prev = p.clone();
        for _ in 0..500 {
            prev.clone_from(&p);
            adam_step("w", &mut p, &[0.3, -7.0], &mut st, &cfg).unwrap();
        }
        assert!((p[0] - prev[0] + 0.01).abs() < 1e-5);
        assert!((p[1] - prev[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = vec![0.0];
        let mut st = AdamMoments::zeros(1);
        let err = adam_step("layer0.wq", &mut p, &[f32::NAN], &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("layer0.wq"));
    }
}
