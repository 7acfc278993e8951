use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Linear warmup from `0.1·lr0` to `lr0`, then cosine decay to `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

pub const WARMUP_START_FACTOR: f64 = 0.1;

pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step >= s.total_steps {
        return s.lr_min;
    }
    if step < s.warmup_steps {
        let frac = step as f64 / s.warmup_steps as f64;
        return s.lr0 * (WARMUP_START_FACTOR + (1.0 - WARMUP_START_FACTOR) * frac);
    }
    let t = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.lr_min + 0.5 * (s.lr0 - s.lr_min) * (1.0 + (PI * t).cos())
}
