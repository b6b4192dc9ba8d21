use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::{Error, Result};

/// Multiply the learning rate by `decay` every `step_size` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub step_size: usize,
    pub decay: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay {
            step_size: 20,
            decay: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap applied to the gradient before each update.
    pub clip_norm: Option<f64>,
    pub schedule: StepDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            schedule: StepDecay::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    first_moment: ParamSet,
    second_moment: ParamSet,
    step: u64,
    lr: f64,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        OptimState {
            config,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            lr: config.lr,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the next update.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies the schedule for `epoch` (zero-based).
    pub fn start_epoch(&mut self, epoch: usize) {
        self.lr = scheduled_lr(&self.config, epoch);
    }
}

/// `base * decay^floor(epoch / step_size)`.
pub fn scheduled_lr(config: &AdamConfig, epoch: usize) -> f64 {
    let s = config.schedule;
    if s.step_size == 0 {
        return config.lr;
    }
    config.lr * s.decay.powi((epoch / s.step_size) as i32)
}

/// One Adam update with bias correction. The gradient is rescaled so its
/// global L2 norm does not exceed the configured cap.
pub fn optimizer_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || grads.layers.len() != params.layers.len() {
        return Err(Error::shape("gradient shape differs from parameters"));
    }
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let cfg = state.config;
    let scale = match cfg.clip_norm {
        Some(max_norm) => {
            let norm = grads.l2_norm();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let lr = state.lr;

    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.first_moment.tensors_mut())
        .zip(state.second_moment.tensors_mut())
    {
        if p.len() != g.len() {
            return Err(Error::shape("gradient tensor size differs from parameter"));
        }
        for i in 0..p.len() {
            let gi = g[i] * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
