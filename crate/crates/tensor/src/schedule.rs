use std::f64::consts::PI;

/// Per-step cosine annealing from `lr_max` down to `lr_min`, optionally after
/// a linear warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn cosine(lr_max: f64, total_steps: usize) -> Self {
        Self {
            lr_max,
            lr_min: 0.0,
            total_steps,
            warmup_steps: 0,
        }
    }

    /// Ramps linearly up to `lr_max` over the first `steps` steps (capped at
    /// `total_steps`); the cosine then spans the remaining steps.
    pub fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup_steps = steps.min(self.total_steps);
        self
    }

    /// `lr_max (t + 1) / W` during warmup, then
    /// `lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi (t - W) / (T - W)))`,
    /// clamped to `lr_min` past `T`.
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.lr_min;
        }
        let w = self.warmup_steps;
        if step < w {
            return self.lr_max * (step + 1) as f64 / w as f64;
        }
        let progress = (step - w) as f64 / (self.total_steps - w) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * progress).cos())
    }
}
