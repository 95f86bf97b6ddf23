//! Pseudo-label weighting: for a target head, pick the pseudo-label produced
//! by the two other heads, sort the sample into not-useful /
//! useful-and-difficult / useful-and-easy, and emit its loss weight
//!
//! `W = [1 * (M_i & M_j & agree) + w_d * (M_i xor M_j)] * (F_i | F_j)`
//!
//! where `M_k` is head k's APM confidence in its own label and `F_k` its
//! self-adaptive confidence filter.

use serde::{Deserialize, Serialize};

use crate::apm::{apm_high_confidence, ApmLedger, GammaState};
use crate::error::{Error, Result};
use crate::freematch::ThresholdState;
use crate::model::HeadPredictions;

pub const DEFAULT_W_D: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    NotUseful,
    UsefulDifficult,
    UsefulEasy,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::NotUseful => "not_useful",
            Category::UsefulDifficult => "useful_difficult",
            Category::UsefulEasy => "useful_easy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlwmConfig {
    pub w_d: f64,
}

impl Default for PlwmConfig {
    fn default() -> Self {
        Self { w_d: DEFAULT_W_D }
    }
}

/// Indicator values that went into a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterTrace {
    pub agree: bool,
    pub multi_i: bool,
    pub multi_j: bool,
    pub free_multi: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlwmDecision {
    pub target_head: usize,
    pub sample_id: usize,
    pub pseudo_label: Option<usize>,
    pub category: Category,
    pub weight: f64,
    pub trace: FilterTrace,
}

/// Decision counts per category for one batch (or epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryTally {
    pub not_useful: u64,
    pub useful_difficult: u64,
    pub useful_easy: u64,
}

impl CategoryTally {
    pub fn add(&mut self, category: Category) {
        match category {
            Category::NotUseful => self.not_useful += 1,
            Category::UsefulDifficult => self.useful_difficult += 1,
            Category::UsefulEasy => self.useful_easy += 1,
        }
    }

    pub fn merge(&mut self, other: &CategoryTally) {
        self.not_useful += other.not_useful;
        self.useful_difficult += other.useful_difficult;
        self.useful_easy += other.useful_easy;
    }

    pub fn total(&self) -> u64 {
        self.not_useful + self.useful_difficult + self.useful_easy
    }
}

/// Read-only view of the filter state a decision depends on.
#[derive(Debug, Clone, Copy)]
pub struct FilterState<'a> {
    pub ledger: &'a ApmLedger,
    pub gamma: &'a GammaState,
    pub thresholds: &'a [ThresholdState],
}

/// The two generating heads for `target`.
pub fn other_heads(target: usize) -> (usize, usize) {
    match target {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Weight, category and selected label from the indicator values.
pub fn weigh(
    trace: FilterTrace,
    label_i: usize,
    label_j: usize,
    config: &PlwmConfig,
) -> (Category, f64, Option<usize>) {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let easy = trace.multi_i && trace.multi_j && trace.agree;
    let difficult = trace.multi_i ^ trace.multi_j;
    let weight = (ind(easy) + config.w_d * ind(difficult)) * ind(trace.free_multi);
    if weight == 0.0 {
        return (Category::NotUseful, 0.0, None);
    }
    if easy {
        (Category::UsefulEasy, weight, Some(label_i))
    } else if trace.multi_i {
        (Category::UsefulDifficult, weight, Some(label_i))
    } else {
        (Category::UsefulDifficult, weight, Some(label_j))
    }
}

/// Decision for sample row `row` (ledger id `sample_id`) and target head `h`.
/// Head `h`'s own prediction is never read.
pub fn decide(
    h: usize,
    weak: &HeadPredictions,
    row: usize,
    sample_id: usize,
    state: FilterState<'_>,
    config: &PlwmConfig,
) -> Result<PlwmDecision> {
    if weak.num_heads() != 3 || h >= 3 {
        return Err(Error::UnsupportedConfiguration(format!(
            "pseudo-label weighting needs exactly 3 heads, got {}",
            weak.num_heads()
        )));
    }
    let (i, j) = other_heads(h);
    let label_i = weak.label_of(i, row);
    let label_j = weak.label_of(j, row);
    let trace = FilterTrace {
        agree: label_i == label_j,
        multi_i: apm_high_confidence(state.ledger, state.gamma, i, sample_id, label_i),
        multi_j: apm_high_confidence(state.ledger, state.gamma, j, sample_id, label_j),
        free_multi: state.thresholds[i].passes_filter(weak.probs_of(i, row))
            | state.thresholds[j].passes_filter(weak.probs_of(j, row)),
    };
    let (category, weight, pseudo_label) = weigh(trace, label_i, label_j, config);
    Ok(PlwmDecision {
        target_head: h,
        sample_id,
        pseudo_label,
        category,
        weight,
        trace,
    })
}

/// Element-wise [`decide`] over a batch, plus category tallies.
pub fn decide_batch(
    h: usize,
    weak: &HeadPredictions,
    sample_ids: &[usize],
    state: FilterState<'_>,
    config: &PlwmConfig,
) -> Result<(Vec<PlwmDecision>, CategoryTally)> {
    let mut tally = CategoryTally::default();
    let decisions = sample_ids
        .iter()
        .enumerate()
        .map(|(row, &id)| {
            let d = decide(h, weak, row, id, state, config)?;
            tally.add(d.category);
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((decisions, tally))
}
