//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{decays, ParamSet};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for {name} at element {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("expected {expected} gradients, got {actual}")]
    Count { expected: usize, actual: usize },
    #[error("gradient for {name} has {actual} elements, parameter has {expected}")]
    Shape {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::Config(format!("{self:?}")))
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update over every parameter whose `trainable` flag is set.
/// Biases and LayerNorm gains are never decayed.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    config: &AdamWConfig,
    trainable: &[bool],
) -> Result<(), OptimError> {
    let n = params.len();
    for actual in [grads.len(), trainable.len(), state.m.len()] {
        if actual != n {
            return Err(OptimError::Count { expected: n, actual });
        }
    }
    for (i, g) in grads.iter().enumerate() {
        let expected = params.tensors()[i].len();
        if g.len() != expected {
            return Err(OptimError::Shape {
                name: params.name(i).to_string(),
                expected,
                actual: g.len(),
            });
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                name: params.name(i).to_string(),
                index,
            });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let names: Vec<bool> = params.names().iter().map(|n| decays(n)).collect();
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        if !trainable[i] {
            continue;
        }
        let wd = if names[i] { config.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let old = *p;
            *p = old - config.lr * m_hat / (v_hat.sqrt() + config.eps) - config.lr * wd * old;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(name: &str, w: f64, g: f64, wd: f64) -> f64 {
        let mut params = ParamSet::new();
        params.push(name, Tensor::scalar(w));
        let mut state = OptimizerState::new(&params);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        adamw_step(&mut params, &[vec![g]], &mut state, &cfg, &[true]).unwrap();
        assert_eq!(state.t, 1);
        params.tensors()[0].item()
    }

    #[test]
    fn first_step_examples() {
        // m̂ = v̂ = 1 so the step is lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((single("w", 1.0, 1.0, 0.0) - expected).abs() < 1e-15);
        assert!((single("w", 1.0, 1.0, 0.0) - 0.9).abs() < 1e-8);
        assert!((single("w", 1.0, 1.0, 0.01) - (expected - 0.001)).abs() < 1e-15);
        assert_eq!(single("w", 1.0, 0.0, 0.0), 1.0);
        // biases are not decayed
        assert!((single("x.bias", 1.0, 1.0, 0.01) - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::scalar(1.0));
        let mut state = OptimizerState::new(&params);
        let err = adamw_step(
            &mut params,
            &[vec![f64::NAN]],
            &mut state,
            &AdamWConfig::default(),
            &[true],
        );
        assert!(matches!(err, Err(OptimError::NonFiniteGradient { .. })));
        assert_eq!(state.t, 0);
        assert_eq!(params.tensors()[0].item(), 1.0);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut params = ParamSet::new();
        params.push("a", Tensor::scalar(1.0));
        params.push("b", Tensor::scalar(1.0));
        let mut state = OptimizerState::new(&params);
        adamw_step(
            &mut params,
            &[vec![1.0], vec![1.0]],
            &mut state,
            &AdamWConfig::default(),
            &[false, true],
        )
        .unwrap();
        assert_eq!(params.tensors()[0].item(), 1.0);
        assert!(params.tensors()[1].item() < 1.0);
    }
}
