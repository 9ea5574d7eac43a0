//! Linear warmup followed by linear decay, plus the clipping threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
}

fn default_clip_norm() -> f64 {
    2.0
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.max_steps {
            return Err(Error::config(format!(
                "need 0 < warmup_steps < max_steps, got warmup {} / max {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Learning rate at `step`: ramps linearly to `peak_lr` over the warmup,
/// then decays linearly to zero at `max_steps`.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    debug_assert!(step <= cfg.max_steps);
    if step <= cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.peak_lr * (cfg.max_steps - step) as f64 / (cfg.max_steps - cfg.warmup_steps) as f64
    }
}
