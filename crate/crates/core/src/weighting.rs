//! Dynamic task weighting from relative loss descent rates.
//!
//! With `w_k = L_k(t-1) / L_k(t-2)` the weight of task `k` in epoch `t` is
//! `K/(K-1) * (1 - softmax(Z w)_k)`, so the task whose loss falls fastest
//! (smallest ratio) receives the largest weight and the weights sum to `K`.

use crate::error::{Error, Result};

pub const DEFAULT_Z: f64 = 3.0;
/// Below this previous-epoch loss the descent rate is pinned to 1.
const RATE_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightState {
    z: f64,
    /// `history[k][e]` is the mean loss of task `k` in epoch `e + 1`.
    history: Vec<Vec<f64>>,
}

impl WeightState {
    pub fn new(tasks: usize, z: f64) -> Result<Self> {
        if tasks < 2 {
            return Err(Error::Scheduler(format!("need at least 2 tasks, got {tasks}")));
        }
        if !z.is_finite() {
            return Err(Error::Scheduler(format!("Z must be finite, got {z}")));
        }
        Ok(Self {
            z,
            history: vec![Vec::new(); tasks],
        })
    }

    pub fn tasks(&self) -> usize {
        self.history.len()
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn epochs_recorded(&self) -> usize {
        self.history[0].len()
    }

    pub fn history(&self, task: usize) -> &[f64] {
        &self.history[task]
    }

    pub fn record_epoch(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.tasks() {
            return Err(Error::Scheduler(format!(
                "expected {} task losses, got {}",
                self.tasks(),
                losses.len()
            )));
        }
        if let Some(bad) = losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::Scheduler(format!("task loss must be finite and nonnegative, got {bad}")));
        }
        for (h, &l) in self.history.iter_mut().zip(losses) {
            h.push(l);
        }
        Ok(())
    }

    /// Relative descent rates `w_k` used in epoch `t` (1-based).
    pub fn descent_rates(&self, t: usize) -> Result<Vec<f64>> {
        if t < 1 {
            return Err(Error::Scheduler("epoch index starts at 1".into()));
        }
        if t <= 2 {
            return Ok(vec![1.0; self.tasks()]);
        }
        if self.epochs_recorded() < t - 1 {
            return Err(Error::Scheduler(format!(
                "epoch {t} needs losses of epochs {} and {}, only {} recorded",
                t - 2,
                t - 1,
                self.epochs_recorded()
            )));
        }
        Ok(self
            .history
            .iter()
            .map(|h| {
                let (prev, prev2) = (h[t - 2], h[t - 3]);
                if prev2 < RATE_GUARD {
                    1.0
                } else {
                    prev / prev2
                }
            })
            .collect())
    }

    pub fn compute_weights(&self, t: usize) -> Result<Vec<f64>> {
        Ok(weights_from_rates(&self.descent_rates(t)?, self.z))
    }
}

pub fn weights_from_rates(rates: &[f64], z: f64) -> Vec<f64> {
    let k = rates.len() as f64;
    let logits: Vec<f64> = rates.iter().map(|w| w * z).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| k / (k - 1.0) * (1.0 - e / sum)).collect()
}
