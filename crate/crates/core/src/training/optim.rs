//! Adam with per-group learning rates, linear warmup and global-norm
//! clipping.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::towers::{Grads, ModelParams, ParamGroup, ParamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub valid_fraction: f64,
    /// Emit a training-log line every this many steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            warmup_steps: 2000,
            lr_encoder: 2e-4,
            lr_other: 7e-4,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 20,
            patience: 3,
            seed: 0,
            valid_fraction: 0.1,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    /// The large-batch preset (B = 512).
    pub fn large_batch() -> Self {
        Self { batch_size: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        if self.warmup_steps == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::InvalidConfig(
                "warmup_steps, max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.lr_encoder > 0.0 && self.lr_other > 0.0 && self.clip_norm > 0.0) {
            return Err(TrainError::InvalidConfig("learning rates and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(TrainError::InvalidConfig("bad Adam hyperparameters".into()));
        }
        Ok(())
    }

    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Other => self.lr_other,
        }
    }
}

/// Linear warmup to the group rate over `warmup_steps`, constant after.
pub fn lr_at_step(t: u64, group: ParamGroup, cfg: &TrainConfig) -> f64 {
    let ramp = ((t + 1) as f64 / cfg.warmup_steps as f64).min(1.0);
    cfg.base_lr(group) * ramp
}

/// Scales all gradients by `clip_norm / norm` when the global L2 norm exceeds
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Grads, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        let s = clip_norm / norm;
        grads.tensors.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(p: &ModelParams) -> Self {
        Self {
            m: p.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: p.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update at step `state.t`, then `t += 1`. Updated
/// parameters are stored at `f32` precision.
pub fn adam_step(params: &mut ModelParams, grads: &Grads, state: &mut OptimizerState, cfg: &TrainConfig) {
    let t = state.t;
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for id in ParamId::ALL {
        let i = id as usize;
        let lr = lr_at_step(t, id.group(), cfg);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = &grads.tensors[i];
        for (k, p) in params.tensors[i].data.iter_mut().enumerate() {
            let gk = g[k];
            if gk == 0.0 && m[k] == 0.0 && v[k] == 0.0 {
                continue;
            }
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let update = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
            *p = (*p - update) as f32 as f64;
        }
    }
}
