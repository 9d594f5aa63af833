use std::f64::consts::PI;

/// `lr(t) = lr_end + (lr_start − lr_end)·(1 + cos(π·t/T))/2`, held at
/// `lr_end` once `t ≥ T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total: u64) -> Self {
        CosineSchedule { lr_start, lr_end, total }
    }

    pub fn lr(&self, t: u64) -> f64 {
        if t == 0 {
            return self.lr_start;
        }
        if t >= self.total {
            return self.lr_end;
        }
        let w = 0.5 * (1.0 + (PI * t as f64 / self.total as f64).cos());
        (self.lr_end + (self.lr_start - self.lr_end) * w).min(self.lr_start)
    }
}
