//! Linear warmup followed by cosine annealing to zero.

use std::f32::consts::PI;

#[derive(Debug, Clone, Copy)]
pub struct WarmupCosine {
    pub peak_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn new(peak_lr: f32, warmup_steps: u64, total_steps: u64) -> Self {
        assert!(warmup_steps < total_steps, "warmup must end before the run does");
        WarmupCosine {
            peak_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// lr at `step`: 0 at step 0, `peak_lr` at the end of warmup, then
    /// cosine decay reaching 0 at `total_steps`.
    pub fn lr(&self, step: u64) -> f32 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f32 / self.warmup_steps as f32;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let prog = (step - self.warmup_steps) as f32 / (self.total_steps - self.warmup_steps) as f32;
        self.peak_lr * 0.5 * (1.0 + (PI * prog).cos())
    }
}
