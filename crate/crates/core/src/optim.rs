//! Adam with decoupled weight decay, and the round-level learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment accumulators and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64, hp: &AdamWParams) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
        let one = T::one();
        let c1 = one - T::of(hp.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let c2 = one - T::of(hp.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let (lr, eps, wd) = (T::of(lr), T::of(hp.eps), T::of(hp.weight_decay));
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps) + wd * *p;
            *p -= lr * update;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    None,
    #[default]
    WarmupCosine,
}

/// Base rate for `round` (0-based): linear warm-up over `warmup_rounds`, then
/// cosine annealing to zero at `total_rounds`. Constant within a round.
pub fn scheduled_lr(base: f64, mode: SchedulerMode, round: usize, warmup_rounds: usize, total_rounds: usize) -> f64 {
    match mode {
        SchedulerMode::None => base,
        SchedulerMode::WarmupCosine => {
            if round < warmup_rounds {
                base * (round + 1) as f64 / warmup_rounds as f64
            } else {
                let span = total_rounds.saturating_sub(warmup_rounds).max(1) as f64;
                let t = ((round - warmup_rounds) as f64 / span).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}
