//! Linear warmup followed by cosine decay, evaluated per optimizer step.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs.min(self.total_epochs) * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// Learning rate for 0-based step `s`:
    /// `base * (s+1) / W` during warmup, then
    /// `base * (1 + cos(pi * (s-W) / (S-W-1))) / 2`, reaching 0 on the last
    /// step `S-1` and staying there.
    pub fn lr(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        let total = self.total_steps();
        if step < w {
            return self.base_lr * (step + 1) as f64 / w as f64;
        }
        if step >= total {
            return 0.0;
        }
        let span = total - w - 1;
        if span == 0 {
            return 0.0;
        }
        let progress = (step - w) as f64 / span as f64;
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}
