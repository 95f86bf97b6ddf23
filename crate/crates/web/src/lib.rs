//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export returns a JSON string. The `*_json` functions hold the logic
//! and are usable (and tested) natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use multimatch_core::config::ExperimentConfig;
use multimatch_core::datagen::{self, LongTailSpec};
use multimatch_core::plwm::{weigh, FilterTrace, PlwmConfig};
use multimatch_core::Algorithm;

#[derive(Serialize)]
struct LongTailView {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    clamped: usize,
    degenerate: bool,
}

pub fn long_tail_json(classes: usize, largest: usize, gamma: f64, multiplier: usize) -> Result<String, String> {
    let counts = datagen::long_tail_counts(&LongTailSpec {
        num_classes: classes,
        largest,
        gamma_imb: gamma,
        unlabeled_multiplier: multiplier,
    })
    .map_err(|e| e.to_string())?;
    let degenerate = counts.is_degenerate();
    serde_json::to_string(&LongTailView {
        labeled: counts.labeled,
        unlabeled: counts.unlabeled,
        clamped: counts.clamped,
        degenerate,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct WeightView {
    category: &'static str,
    weight: f64,
    /// Which generating head's label is used: "i", "j" or none.
    label_from: Option<&'static str>,
}

pub fn plwm_weight_json(agree: bool, multi_i: bool, multi_j: bool, free: bool, w_d: f64) -> Result<String, String> {
    if !(w_d > 0.0) {
        return Err("w_d must be > 0".into());
    }
    let trace = FilterTrace {
        agree,
        multi_i,
        multi_j,
        free_multi: free,
    };
    // distinct stand-in labels so the chosen head is visible
    let (category, weight, label) = weigh(trace, 0, 1, &PlwmConfig { w_d });
    let label_from = label.map(|l| if l == 0 { "i" } else { "j" });
    serde_json::to_string(&WeightView {
        category: category.as_str(),
        weight,
        label_from,
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    algorithm: String,
    epoch: Vec<usize>,
    mask_rate: Vec<f64>,
    impurity: Vec<f64>,
    test_error: Vec<f64>,
    final_test_error: f64,
}

/// Trains each listed algorithm once on the configured task.
pub fn run_json(config_text: &str, algorithms: &str, seed: u64) -> Result<String, String> {
    let cfg = ExperimentConfig::parse(config_text).map_err(|e| e.to_string())?;
    let algs: Vec<Algorithm> = algorithms
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e: multimatch_core::Error| e.to_string())?;
    let mut curves = Vec::with_capacity(algs.len());
    for alg in algs {
        let r = cfg.run_single(alg, seed).map_err(|e| e.to_string())?;
        curves.push(Curve {
            algorithm: alg.name().to_string(),
            epoch: r.epochs.iter().map(|m| m.epoch).collect(),
            mask_rate: r.epochs.iter().map(|m| m.mask_rate).collect(),
            impurity: r.epochs.iter().map(|m| m.impurity).collect(),
            test_error: r.epochs.iter().map(|m| m.test_error).collect(),
            final_test_error: r.final_test_error,
        });
    }
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = longTailCounts)]
pub fn long_tail_counts(classes: usize, largest: usize, gamma: f64, multiplier: usize) -> Result<String, JsError> {
    long_tail_json(classes, largest, gamma, multiplier).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = plwmWeight)]
pub fn plwm_weight(agree: bool, multi_i: bool, multi_j: bool, free: bool, w_d: f64) -> Result<String, JsError> {
    plwm_weight_json(agree, multi_i, multi_j, free, w_d).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = runExperiment)]
pub fn run_experiment(config_text: &str, algorithms: &str, seed: u64) -> Result<String, JsError> {
    run_json(config_text, algorithms, seed).map_err(|e| JsError::new(&e))
}
