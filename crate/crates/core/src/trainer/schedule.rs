use std::f64::consts::PI;

/// Linear warmup from `base` to `peak`, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.base + (self.peak - self.base) * t;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let decay = (self.total_steps - self.warmup_steps) as f64;
        let t = (step - self.warmup_steps) as f64 / decay;
        0.5 * self.peak * (1.0 + (PI * t).cos())
    }
}
