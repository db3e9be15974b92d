use serde::{Deserialize, Serialize};

/// Per-step linear warmup followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            min_lr: 0.0,
            warmup_epochs: 10,
            total_epochs: 300,
        }
    }
}

impl LrSchedule {
    /// Learning rate at 0-based `step`. Warmup climbs from
    /// `base_lr/warmup_steps` to `base_lr` on the last warmup step; the cosine
    /// then reaches `min_lr` on the final step of training.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let spe = steps_per_epoch.max(1);
        let warmup = self.warmup_epochs * spe;
        let total = (self.total_epochs * spe).max(1);
        if step < warmup {
            return self.base_lr * (step + 1) as f64 / warmup as f64;
        }
        let span = total.saturating_sub(1).saturating_sub(warmup);
        let progress = if span == 0 {
            1.0
        } else {
            ((step - warmup) as f64 / span as f64).min(1.0)
        };
        self.min_lr + (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }
}

/// Free-function form of [`LrSchedule::lr_at`].
pub fn lr_at(schedule: &LrSchedule, global_step: usize, steps_per_epoch: usize) -> f64 {
    schedule.lr_at(global_step, steps_per_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            base_lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 10,
            total_epochs: 100,
        }
    }

    #[test]
    fn warmup_endpoints() {
        let s = sched();
        assert!((s.lr_at(0, 7) - 1e-3 / 70.0).abs() < 1e-18);
        assert_eq!(s.lr_at(69, 7), 1e-3);
        assert!(s.lr_at(30, 7) < s.lr_at(31, 7));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = sched();
        let spe = 5;
        let last = 100 * spe - 1;
        assert!((s.lr_at(last, spe) - s.min_lr).abs() < 1e-15);
        assert!((s.lr_at(50, spe) - s.base_lr).abs() < 1e-15);
        // Decay spans steps 50..=499; its midpoint is 274.5, so use an even span.
        let even = LrSchedule {
            total_epochs: 101,
            ..s
        };
        let mid = 50 + (101 * spe - 1 - 50) / 2;
        assert!((even.lr_at(mid, spe) - (s.base_lr + s.min_lr) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn monotone_decay_and_no_warmup() {
        let s = LrSchedule {
            warmup_epochs: 0,
            ..sched()
        };
        assert_eq!(s.lr_at(0, 3), s.base_lr);
        let lrs: Vec<f64> = (0..300).map(|t| s.lr_at(t, 3)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(lr_at(&s, 10_000, 3), s.min_lr);
    }
}
