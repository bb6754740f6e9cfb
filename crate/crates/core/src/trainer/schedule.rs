use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise learning-rate schedule over (possibly fractional) epochs:
/// linear warmup from zero, linear decay, then exponential decay with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_end_epoch: f64,
    pub linear_end_epoch: f64,
    pub linear_end_value: f64,
    /// Per-epoch multiplier in the exponential phase.
    pub exp_factor: f64,
    pub min_lr: f64,
    pub last_epoch: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 1e-3,
            warmup_end_epoch: 2.0,
            linear_end_epoch: 27.0,
            linear_end_value: 7e-4,
            exp_factor: 0.7,
            min_lr: 1e-7,
            last_epoch: 40.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak > 0.0
            && self.min_lr > 0.0
            && self.warmup_end_epoch > 0.0
            && self.linear_end_epoch >= self.warmup_end_epoch
            && self.last_epoch >= self.linear_end_epoch
            && self.exp_factor > 0.0
            && self.exp_factor <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid learning-rate schedule {self:?}"
            )))
        }
    }

    /// Maps training progress (`epochs_done` out of `total_epochs`) onto the
    /// schedule's epoch axis, compressing it to the run length.
    pub fn schedule_epoch(&self, epochs_done: f64, total_epochs: usize) -> f64 {
        epochs_done * self.last_epoch / total_epochs.max(1) as f64
    }
}

pub fn lr_at(epoch: f64, sched: &LrSchedule) -> f64 {
    let e = epoch.max(0.0);
    let lr = if e <= sched.warmup_end_epoch {
        sched.peak * e / sched.warmup_end_epoch
    } else if e <= sched.linear_end_epoch {
        let frac = (e - sched.warmup_end_epoch) / (sched.linear_end_epoch - sched.warmup_end_epoch);
        sched.peak + (sched.linear_end_value - sched.peak) * frac
    } else {
        sched.linear_end_value * sched.exp_factor.powf(e - sched.linear_end_epoch)
    };
    lr.max(sched.min_lr)
}
