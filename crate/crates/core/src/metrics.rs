//! Pseudo-label quality (mask rate, impurity), per-epoch records and
//! Friedman ranks across algorithms and setups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plwm::{CategoryTally, PlwmDecision};

/// Counts behind mask rate and impurity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecisionStats {
    pub decisions: u64,
    pub masked: u64,
    pub included: u64,
    /// Included decisions whose pseudo-label differs from the true label.
    pub impure: u64,
}

impl DecisionStats {
    pub fn merge(&mut self, other: &DecisionStats) {
        self.decisions += other.decisions;
        self.masked += other.masked;
        self.included += other.included;
        self.impure += other.impure;
    }

    /// Fraction of decisions with weight 0; 0 for no decisions.
    pub fn mask_rate(&self) -> f64 {
        if self.decisions == 0 {
            0.0
        } else {
            self.masked as f64 / self.decisions as f64
        }
    }

    /// Fraction of included pseudo-labels that are wrong; 0 when nothing was
    /// included (see [`impurity_defined`](Self::impurity_defined)).
    pub fn impurity(&self) -> f64 {
        if self.included == 0 {
            0.0
        } else {
            self.impure as f64 / self.included as f64
        }
    }

    pub fn impurity_defined(&self) -> bool {
        self.included > 0
    }
}

/// Folds decisions paired with the sample's true label.
pub fn accumulate<'a, I>(decisions: I) -> DecisionStats
where
    I: IntoIterator<Item = (&'a PlwmDecision, usize)>,
{
    let mut s = DecisionStats::default();
    for (d, truth) in decisions {
        s.decisions += 1;
        if d.weight > 0.0 {
            s.included += 1;
            if d.pseudo_label != Some(truth) {
                s.impure += 1;
            }
        } else {
            s.masked += 1;
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean over steps of the summed per-head supervised loss.
    pub loss_sup: f64,
    /// Mean over steps of the summed per-head unsupervised loss.
    pub loss_unsup: f64,
    pub mask_rate: f64,
    pub impurity: f64,
    pub impurity_defined: bool,
    pub val_error: f64,
    pub test_error: f64,
    pub stats: DecisionStats,
    pub categories: CategoryTally,
    /// Mean APM threshold per head after the epoch's recomputation.
    pub gamma_mean: Vec<f64>,
}

/// Errors of several algorithms over several setups.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorTable {
    pub algorithms: Vec<String>,
    pub setups: Vec<String>,
    cells: BTreeMap<(String, String), f64>,
}

impl ErrorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, algorithm: &str, setup: &str, error: f64) {
        if !self.algorithms.iter().any(|a| a == algorithm) {
            self.algorithms.push(algorithm.to_string());
        }
        if !self.setups.iter().any(|s| s == setup) {
            self.setups.push(setup.to_string());
        }
        self.cells
            .insert((algorithm.to_string(), setup.to_string()), error);
    }

    pub fn get(&self, algorithm: &str, setup: &str) -> Option<f64> {
        self.cells
            .get(&(algorithm.to_string(), setup.to_string()))
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub algorithms: Vec<String>,
    pub setups: Vec<String>,
    /// `ranks[a][s]`: rank of algorithm `a` in setup `s` (1 = lowest error).
    pub ranks: Vec<Vec<f64>>,
    pub friedman: Vec<f64>,
    pub mean_error: Vec<f64>,
    /// Position by Friedman rank (1 = best; ties share the smaller position).
    pub final_rank: Vec<usize>,
}

/// Ascending ranks with tied values sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Per-setup average ranks and their mean over setups.
pub fn friedman_ranks(table: &ErrorTable) -> Result<RankTable> {
    let na = table.algorithms.len();
    let mut ranks = vec![Vec::with_capacity(table.setups.len()); na];
    for setup in &table.setups {
        let column = table
            .algorithms
            .iter()
            .map(|a| {
                table.get(a, setup).ok_or_else(|| Error::MissingCell {
                    algorithm: a.clone(),
                    setup: setup.clone(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        for (a, r) in average_ranks(&column).into_iter().enumerate() {
            ranks[a].push(r);
        }
    }
    let m = table.setups.len().max(1) as f64;
    let friedman: Vec<f64> = ranks.iter().map(|r| r.iter().sum::<f64>() / m).collect();
    let mean_error = table
        .algorithms
        .iter()
        .map(|a| {
            let v: Vec<f64> = table.setups.iter().filter_map(|s| table.get(a, s)).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect();
    let final_rank = friedman
        .iter()
        .map(|f| 1 + friedman.iter().filter(|g| *g < f).count())
        .collect();
    Ok(RankTable {
        algorithms: table.algorithms.clone(),
        setups: table.setups.clone(),
        ranks,
        friedman,
        mean_error,
        final_rank,
    })
}
