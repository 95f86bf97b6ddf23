//! Pseudo-margins, the per-(head, sample, class) average pseudo-margin
//! ledger, and class-wise APM thresholds estimated from the samples on which
//! the other heads agree.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkit::percentile_lower;

pub const DEFAULT_LAMBDA_M: f64 = 0.999;
pub const DEFAULT_PERCENTILE: f64 = 5.0;

/// `z_c - max_{i != c} z_i`.
pub fn pseudo_margin(logits: &[f64], class: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(invalid("pseudo-margin needs at least two classes"));
    }
    if class >= logits.len() {
        return Err(invalid(format!("class {class} out of range")));
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != class)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[class] - other)
}

/// Pseudo-margins for every class in one pass.
fn all_margins(logits: &[f64], out: &mut [f64]) {
    let mut top = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[top] {
            top = i;
        }
    }
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    for (c, (o, &z)) in out.iter_mut().zip(logits).enumerate() {
        *o = if c == top { z - runner_up } else { z - logits[top] };
    }
}

/// Average pseudo-margins for every head, unlabeled sample and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApmLedger {
    heads: usize,
    samples: usize,
    classes: usize,
    lambda_m: f64,
    apm: Vec<f64>,
    updates: Vec<u64>,
}

impl ApmLedger {
    pub fn new(heads: usize, samples: usize, classes: usize, lambda_m: f64) -> Result<Self> {
        if classes < 2 {
            return Err(invalid("ledger needs at least two classes"));
        }
        if !(0.0..=1.0).contains(&lambda_m) {
            return Err(invalid(format!("APM decay {lambda_m} outside [0, 1]")));
        }
        Ok(Self {
            heads,
            samples,
            classes,
            lambda_m,
            apm: vec![0.0; heads * samples * classes],
            updates: vec![0; heads * samples],
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn lambda_m(&self) -> f64 {
        self.lambda_m
    }

    #[inline]
    fn offset(&self, head: usize, sample: usize) -> usize {
        (head * self.samples + sample) * self.classes
    }

    pub fn apm(&self, head: usize, sample: usize, class: usize) -> f64 {
        self.apm[self.offset(head, sample) + class]
    }

    pub fn apm_row(&self, head: usize, sample: usize) -> &[f64] {
        let o = self.offset(head, sample);
        &self.apm[o..o + self.classes]
    }

    pub fn update_count(&self, head: usize, sample: usize) -> u64 {
        self.updates[head * self.samples + sample]
    }

    /// Folds the current logits of `sample` under `head` into its APM:
    /// `APM = PM * lm/(1+t) + APM * (1 - lm/(1+t))` with `t` the number of
    /// earlier updates of this (head, sample).
    pub fn update(&mut self, head: usize, sample: usize, logits: &[f64]) -> Result<()> {
        if head >= self.heads || sample >= self.samples {
            return Err(invalid(format!(
                "ledger slot ({head}, {sample}) out of range"
            )));
        }
        if logits.len() != self.classes {
            return Err(invalid("logit width does not match ledger classes"));
        }
        let t = self.updates[head * self.samples + sample];
        let mix = self.lambda_m / (1.0 + t as f64);
        let mut pm = vec![0.0; self.classes];
        all_margins(logits, &mut pm);
        let o = self.offset(head, sample);
        for (a, p) in self.apm[o..o + self.classes].iter_mut().zip(&pm) {
            *a = p * mix + *a * (1.0 - mix);
        }
        self.updates[head * self.samples + sample] = t + 1;
        Ok(())
    }
}

/// Lower bound applied to the recomputed thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GammaFloor {
    Bound(f64),
    /// No lower bound (`-inf`).
    Unbounded,
}

impl GammaFloor {
    fn clamp(self, v: f64) -> f64 {
        match self {
            GammaFloor::Bound(min) => v.max(min),
            GammaFloor::Unbounded => v,
        }
    }

    /// Threshold used before any recomputation has happened.
    pub fn initial(self) -> f64 {
        match self {
            GammaFloor::Bound(min) => min,
            GammaFloor::Unbounded => 0.0,
        }
    }
}

/// Class-wise APM thresholds per head plus the per-epoch reservoirs of
/// agreement APM values they are recomputed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaState {
    heads: usize,
    classes: usize,
    gamma: Vec<f64>,
    pub percentile: f64,
    pub floor: GammaFloor,
    reservoirs: Vec<Vec<f64>>,
}

impl GammaState {
    pub fn new(heads: usize, classes: usize, percentile: f64, floor: GammaFloor) -> Result<Self> {
        if !(percentile > 0.0 && percentile < 100.0) {
            return Err(invalid(format!("percentile {percentile} outside (0, 100)")));
        }
        Ok(Self {
            heads,
            classes,
            gamma: vec![floor.initial(); heads * classes],
            percentile,
            floor,
            reservoirs: vec![Vec::new(); heads * classes],
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn gamma(&self, head: usize, class: usize) -> f64 {
        self.gamma[head * self.classes + class]
    }

    pub fn set_gamma(&mut self, head: usize, class: usize, value: f64) {
        self.gamma[head * self.classes + class] = value;
    }

    pub fn reservoir(&self, head: usize, class: usize) -> &[f64] {
        &self.reservoirs[head * self.classes + class]
    }

    /// Appends one APM value of a contributing head `k != head` to the
    /// `(head, class)` reservoir of the current epoch.
    pub fn record_agreement_value(&mut self, head: usize, class: usize, apm_value: f64) {
        self.reservoirs[head * self.classes + class].push(apm_value);
    }

    /// `gamma = max(floor, percentile_f(reservoir))` for every non-empty
    /// reservoir; empty ones keep their threshold. Clears all reservoirs.
    pub fn recompute(&mut self) {
        for (g, res) in self.gamma.iter_mut().zip(self.reservoirs.iter_mut()) {
            if let Ok(p) = percentile_lower(res, self.percentile) {
                *g = self.floor.clamp(p);
            }
            res.clear();
        }
    }
}

/// `APM[head][sample][class] > gamma[head][class]`, strictly.
pub fn apm_high_confidence(
    ledger: &ApmLedger,
    gamma: &GammaState,
    head: usize,
    sample: usize,
    class: usize,
) -> bool {
    ledger.apm(head, sample, class) > gamma.gamma(head, class)
}
