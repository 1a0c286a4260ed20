use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradError, Parameters, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments, lazily allocated per parameter on first touch.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }
}

/// One bias-corrected update over every trainable parameter. Parameters
/// without a gradient entry are treated as zero-gradient (their moments
/// still decay). Rejected without touching anything: NaN/inf gradients,
/// gradients for frozen or unknown parameters, shape mismatches.
pub fn optimizer_step(
    params: &mut Parameters,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<()> {
    for (path, grad) in grads {
        let entry = params.get(path)?;
        if !entry.trainable {
            return Err(GradError::FrozenParamGrad(path.clone()));
        }
        if entry.tensor.shape != grad.shape {
            return Err(GradError::ShapeMismatch {
                layer: path.clone(),
                expected: format!("{:?}", entry.tensor.shape),
                actual: format!("{:?}", grad.shape),
            });
        }
        if grad.values.iter().any(|v| !v.is_finite()) {
            return Err(GradError::Diverged);
        }
    }

    state.step += 1;
    let t = state.step;
    let cfg = state.config;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    let zero = Tensor::scalar(0.0);
    for (path, entry) in params.entries.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let n = entry.tensor.numel();
        let grad = grads.get(path).unwrap_or(&zero);
        let gv: &[f64] = if grad.numel() == n { &grad.values } else { &[] };

        let m = state
            .first_moment
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(entry.tensor.shape.clone()));
        for i in 0..n {
            let g = gv.get(i).copied().unwrap_or(0.0);
            m.values[i] = cfg.beta1 * m.values[i] + (1.0 - cfg.beta1) * g;
        }
        let v = state
            .second_moment
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(entry.tensor.shape.clone()));
        for i in 0..n {
            let g = gv.get(i).copied().unwrap_or(0.0);
            v.values[i] = cfg.beta2 * v.values[i] + (1.0 - cfg.beta2) * g * g;
        }
        let m = &state.first_moment[path];
        let v = &state.second_moment[path];
        for i in 0..n {
            let m_hat = m.values[i] / bc1;
            let v_hat = v.values[i] / bc2;
            entry.tensor.values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
