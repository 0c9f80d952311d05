//! AdamW optimizer and the warmup/constant/cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{GradBuf, ParamArena};

/// AdamW with decoupled weight decay; plain Adam is `weight_decay = 0`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    /// Per-scalar trainable mask; `None` trains everything.
    mask: Option<Vec<bool>>,
}

impl AdamW {
    pub fn new(arena: &ParamArena, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; arena.len()],
            v: vec![0.0; arena.len()],
            step: 0,
            mask: None,
        }
    }

    /// Restrict updates to parameters whose name satisfies the predicate
    /// (linear probing trains only the head).
    pub fn with_trainable(arena: &ParamArena, weight_decay: f64, pred: impl Fn(&str) -> bool) -> Self {
        let mut mask = vec![false; arena.len()];
        for e in arena.entries() {
            if pred(&e.name) {
                for m in mask.iter_mut().skip(e.offset).take(e.len()) {
                    *m = true;
                }
            }
        }
        let mut opt = AdamW::new(arena, weight_decay);
        opt.mask = Some(mask);
        opt
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, arena: &mut ParamArena, grads: &GradBuf, lr: f64) {
        assert_eq!(arena.len(), self.m.len(), "optimizer/arena size mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let g = grads.data();
        let data = arena.data_mut();
        for i in 0..data.len() {
            if let Some(mask) = &self.mask {
                if !mask[i] {
                    continue;
                }
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
        }
    }

    /// Serializable optimizer state (moments + step) for checkpoints.
    pub fn state(&self) -> (u64, &[f64], &[f64]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<f64>, v: Vec<f64>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Per-epoch learning rate: linear warmup, optional constant hold, then
/// cosine decay to `end` at `total_epochs`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup_epochs: usize,
    pub constant_epochs: usize,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize, total_epochs: usize) -> f64 {
        if epoch <= self.warmup_epochs {
            if self.warmup_epochs == 0 {
                return self.peak;
            }
            let f = epoch as f64 / self.warmup_epochs as f64;
            return self.start + (self.peak - self.start) * f;
        }
        let hold_end = self.warmup_epochs + self.constant_epochs;
        if epoch <= hold_end {
            return self.peak;
        }
        let remaining = total_epochs.saturating_sub(hold_end);
        if remaining == 0 {
            return self.end;
        }
        let f = ((epoch - hold_end) as f64 / remaining as f64).min(1.0);
        self.end + (self.peak - self.end) * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
    }
}
