use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then half a cosine period down to zero.
    Cosine,
    /// Linear warmup, then flat.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub warmup_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch: 64,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::Cosine,
            warmup_ratio: 0.03,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio must be in [0, 1), got {}", self.warmup_ratio)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    /// Number of warmup steps, `ceil(warmup_ratio * total)`.
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        // Guard against 0.03 * 100 = 3.0000000000000004 rounding up to 4.
        let w = self.warmup_ratio * total_steps as f64;
        (w - 1e-9).ceil().max(0.0) as usize
    }
}

/// Learning rate for optimizer step `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps(total_steps);
    if step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let span = total_steps.saturating_sub(warmup);
            if span == 0 {
                return cfg.lr;
            }
            let progress = (step.min(total_steps) - warmup) as f64 / span as f64;
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// AdamW update of one flat buffer. `t` is the 1-based step count.
pub fn adam_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &TrainConfig) {
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        theta[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
}

/// One AdamW step over every tensor whose group is not in `frozen`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
    frozen: &[String],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        if frozen.iter().any(|f| f == e.group()) {
            continue;
        }
        adam_update(&mut e.data, &grads[i], &mut state.m[i], &mut state.v[i], t, lr, cfg);
    }
    Ok(())
}
