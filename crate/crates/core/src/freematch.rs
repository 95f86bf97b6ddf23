//! Self-adaptive confidence thresholds: a global EMA of the batch mean
//! max-confidence, a per-class EMA of the batch mean probability, and
//! their product as the per-class filter threshold.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkit::{argmax_unchecked, RealMatrix};

/// FreeMatch default EMA decay.
pub const DEFAULT_LAMBDA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    tau_global: f64,
    p_local: Vec<f64>,
    lambda: f64,
    step: u64,
}

impl ThresholdState {
    /// Fresh state with `tau = p(c) = 1/C`.
    pub fn new(num_classes: usize, lambda: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid("thresholds need at least two classes"));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid(format!("EMA decay {lambda} outside [0, 1]")));
        }
        let init = 1.0 / num_classes as f64;
        Ok(Self {
            tau_global: init,
            p_local: vec![init; num_classes],
            lambda,
            step: 0,
        })
    }

    /// State with explicit values, e.g. restored from a trace.
    pub fn from_parts(tau_global: f64, p_local: Vec<f64>, lambda: f64, step: u64) -> Result<Self> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if p_local.len() < 2 || !in_unit(tau_global) || !p_local.iter().all(|&p| in_unit(p)) {
            return Err(invalid("threshold values must lie in [0, 1]"));
        }
        if p_local.iter().all(|&p| p == 0.0) {
            return Err(invalid("local thresholds cannot all be zero"));
        }
        Ok(Self {
            tau_global,
            p_local,
            lambda,
            step,
        })
    }

    pub fn tau_global(&self) -> f64 {
        self.tau_global
    }

    pub fn p_local(&self) -> &[f64] {
        &self.p_local
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_classes(&self) -> usize {
        self.p_local.len()
    }

    /// One EMA step from a batch of weak-view probability vectors.
    /// An empty batch leaves the state untouched.
    pub fn update(&mut self, weak_probs: &RealMatrix) {
        let n = weak_probs.rows();
        if n == 0 {
            log::warn!("threshold update skipped: empty batch");
            return;
        }
        debug_assert_eq!(weak_probs.cols(), self.p_local.len());
        let mut mean_max = 0.0;
        let mut mean_p = vec![0.0; self.p_local.len()];
        for q in weak_probs.iter_rows() {
            mean_max += q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (m, p) in mean_p.iter_mut().zip(q) {
                *m += p;
            }
        }
        let inv = 1.0 / n as f64;
        let l = self.lambda;
        self.tau_global = l * self.tau_global + (1.0 - l) * (mean_max * inv);
        for (p, m) in self.p_local.iter_mut().zip(&mean_p) {
            *p = l * *p + (1.0 - l) * (m * inv);
        }
        self.step += 1;
    }

    /// `tau(c) = p(c) / max_c' p(c') * tau`.
    pub fn class_thresholds(&self) -> Vec<f64> {
        let max = self.p_local.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.p_local
            .iter()
            .map(|p| p / max * self.tau_global)
            .collect()
    }

    /// `max(q) > tau(argmax q)`, strictly.
    pub fn passes_filter(&self, weak_probs: &[f64]) -> bool {
        let c = argmax_unchecked(weak_probs);
        let max = self.p_local.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = self.p_local[c] / max * self.tau_global;
        weak_probs[c] > threshold
    }
}
