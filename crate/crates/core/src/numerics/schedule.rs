//! Linear warmup followed by cosine decay to zero.

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicBool, Ordering};

static OVERRUN_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        LrSchedule {
            peak_lr,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    /// Rate at `step`. Ramps 0 -> peak over warmup, then
    /// peak * 0.5 * (1 + cos(pi * progress)) down to exactly 0.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step > self.total_steps {
            if !OVERRUN_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!(
                    "lr_at called with step {step} past total_steps {}; clamping to 0",
                    self.total_steps
                );
            }
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == self.warmup_steps {
            return if step == self.total_steps { 0.0 } else { self.peak_lr };
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        if progress >= 1.0 {
            return 0.0;
        }
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_warmup_boundary() {
        let s = LrSchedule::new(1e-4, 10, 100);
        assert_eq!(s.lr_at(10), 1e-4);
    }

    #[test]
    fn zero_at_end() {
        let s = LrSchedule::new(1e-4, 10, 100);
        assert_eq!(s.lr_at(100), 0.0);
    }

    #[test]
    fn half_peak_at_half_progress() {
        let s = LrSchedule::new(2e-3, 0, 100);
        let lr = s.lr_at(50);
        assert!((lr - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_warmup_and_nonnegative() {
        let s = LrSchedule::new(3e-4, 7, 50);
        let before = s.lr_at(6);
        let at = s.lr_at(7);
        assert!(at >= before);
        assert!((at - 3e-4).abs() < 1e-12);
        for step in 0..=60 {
            assert!(s.lr_at(step) >= 0.0);
        }
    }

    #[test]
    fn overrun_clamps_to_zero() {
        let s = LrSchedule::new(1e-4, 5, 20);
        assert_eq!(s.lr_at(21), 0.0);
        assert_eq!(s.lr_at(1000), 0.0);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let s = LrSchedule::new(1e-4, 0, 10);
        assert_eq!(s.lr_at(0), 1e-4);
    }
}
