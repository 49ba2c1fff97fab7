use crate::{Error, Result};

/// Linear warmup to `peak_lr` followed by linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    peak_lr: f64,
    warmup_steps: u64,
    total_steps: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(warmup_steps > 0 && warmup_steps < total_steps) {
            return Err(Error::Config(alloc::format!(
                "schedule needs 0 < warmup ({warmup_steps}) < total ({total_steps})"
            )));
        }
        if !(peak_lr >= 0.0 && peak_lr.is_finite()) {
            return Err(Error::Config(alloc::format!("peak learning rate {peak_lr}")));
        }
        Ok(Schedule { peak_lr, warmup_steps, total_steps })
    }

    pub fn peak_lr(&self) -> f64 {
        self.peak_lr
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Learning rate at `step`; zero past the end.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step > self.total_steps {
            0.0
        } else if step <= self.warmup_steps {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else {
            self.peak_lr * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        }
    }
}
