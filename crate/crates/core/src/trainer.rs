//! Training loop for MultiMatch and the baselines that share its machinery.
//!
//! Per step, in order:
//! 1. forward the weak labeled view, the weak and the strong unlabeled views;
//! 2. pseudo-label decisions from the pre-update APM ledger, the thresholds
//!    of the previous recomputation and the current confidence thresholds;
//! 3. losses, gradients and one optimizer step;
//! 4. APM ledger update from the weak-view logits;
//! 5. confidence-threshold EMA update per head;
//! 6. agreement-reservoir recording.
//!
//! APM thresholds are recomputed at epoch boundaries. An epoch is one pass
//! over the shuffled unlabeled set.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::abc::AbcState;
use crate::apm::{ApmLedger, GammaFloor, GammaState, DEFAULT_LAMBDA_M, DEFAULT_PERCENTILE};
use crate::datagen::{Augmentor, Sample, Split, View};
use crate::error::{invalid, Error, Result};
use crate::freematch::{ThresholdState, DEFAULT_LAMBDA};
use crate::metrics::{accumulate, DecisionStats, EpochMetrics};
use crate::model::{Activation, HeadPredictions, ModelConfig, ModelState, OptimizerConfig, Sgd};
use crate::numkit::{argmax_unchecked, cross_entropy, percentile_lower, RealMatrix, SeededRng};
use crate::plwm::{self, other_heads, Category, CategoryTally, FilterState, FilterTrace, PlwmConfig, PlwmDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SupervisedOnly,
    FixMatch,
    FreeMatch,
    MultiheadCotrain,
    MarginMatchSimplified,
    MultiMatch,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::SupervisedOnly,
        Algorithm::FixMatch,
        Algorithm::FreeMatch,
        Algorithm::MultiheadCotrain,
        Algorithm::MarginMatchSimplified,
        Algorithm::MultiMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SupervisedOnly => "supervised_only",
            Algorithm::FixMatch => "fixmatch",
            Algorithm::FreeMatch => "freematch",
            Algorithm::MultiheadCotrain => "multihead_cotrain",
            Algorithm::MarginMatchSimplified => "marginmatch_simplified",
            Algorithm::MultiMatch => "multimatch",
        }
    }

    /// Heads the algorithm trains; `configured` applies to the supervised
    /// baseline only.
    pub fn num_heads(self, configured: usize) -> usize {
        match self {
            Algorithm::SupervisedOnly => configured,
            Algorithm::FixMatch | Algorithm::FreeMatch | Algorithm::MarginMatchSimplified => 1,
            Algorithm::MultiheadCotrain | Algorithm::MultiMatch => 3,
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self != Algorithm::SupervisedOnly
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnsupportedConfiguration(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear decay to zero over the whole run.
    Linear,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" => Ok(LrSchedule::Linear),
            other => Err(invalid(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Labeled batch size `B`.
    pub batch_size: usize,
    /// Unlabeled-to-labeled batch ratio.
    pub mu: usize,
    pub w_u: f64,
    pub epochs: usize,
    /// Fixed confidence threshold, FixMatch only.
    pub fixmatch_tau: f64,
    pub seed: u64,
    pub num_heads: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub init_scale: f64,
    pub plwm: PlwmConfig,
    pub percentile: f64,
    pub gamma_floor: GammaFloor,
    pub lambda_f: f64,
    pub lambda_m: f64,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub abc: bool,
    pub abc_loss_weight: f64,
    /// Keep every pseudo-label decision for the trace CSV.
    pub trace_decisions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::MultiMatch,
            batch_size: 8,
            mu: 1,
            w_u: 1.0,
            epochs: 20,
            fixmatch_tau: 0.95,
            seed: 0,
            num_heads: 3,
            hidden_dims: vec![32],
            activation: Activation::Relu,
            init_scale: 1.0,
            plwm: PlwmConfig::default(),
            percentile: DEFAULT_PERCENTILE,
            gamma_floor: GammaFloor::Bound(0.0),
            lambda_f: DEFAULT_LAMBDA,
            lambda_m: DEFAULT_LAMBDA_M,
            optimizer: OptimizerConfig {
                learning_rate: 0.01,
                weight_decay: 1e-4,
                momentum: 0.9,
            },
            schedule: LrSchedule::Constant,
            abc: false,
            abc_loss_weight: 1.0,
            trace_decisions: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.mu == 0 {
            return Err(invalid("batch_size and mu must be positive"));
        }
        if !(self.w_u >= 0.0 && self.w_u.is_finite()) {
            return Err(invalid("w_u must be >= 0"));
        }
        if self.num_heads == 0 {
            return Err(invalid("num_heads must be positive"));
        }
        if !(self.plwm.w_d > 0.0) {
            return Err(invalid("w_d must be > 0"));
        }
        if matches!(self.algorithm, Algorithm::MultiMatch | Algorithm::MultiheadCotrain) && self.num_heads != 3 {
            return Err(Error::UnsupportedConfiguration(format!(
                "{} needs exactly 3 heads, got {}",
                self.algorithm, self.num_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.fixmatch_tau) {
            return Err(invalid("fixmatch_tau must lie in [0, 1]"));
        }
        self.optimizer.validate()
    }
}

/// Losses and pseudo-label tallies of one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub loss_sup: Vec<f64>,
    pub loss_unsup: Vec<f64>,
    pub loss_abc: f64,
    pub total: f64,
    pub categories: CategoryTally,
    /// Per-head mask / impurity counts.
    pub head_stats: Vec<DecisionStats>,
    pub decisions: Vec<PlwmDecision>,
}

impl StepReport {
    pub fn sup_sum(&self) -> f64 {
        self.loss_sup.iter().sum()
    }

    pub fn unsup_sum(&self) -> f64 {
        self.loss_unsup.iter().sum()
    }
}

/// Per-head mean cross-entropy and its gradient with respect to the logits.
pub fn supervised_loss(preds: &HeadPredictions, labels: &[usize]) -> Result<(Vec<f64>, Vec<RealMatrix>)> {
    let n = preds.num_samples();
    if n == 0 || labels.len() != n {
        return Err(invalid("supervised batch is empty or mislabeled"));
    }
    let inv = 1.0 / n as f64;
    let mut losses = Vec::with_capacity(preds.num_heads());
    let mut grads = Vec::with_capacity(preds.num_heads());
    for h in 0..preds.num_heads() {
        let mut loss = 0.0;
        let mut dz = RealMatrix::zeros(n, preds.num_classes());
        for (b, &y) in labels.iter().enumerate() {
            let q = preds.probs_of(h, b);
            loss += cross_entropy(y, q)?;
            for (c, (d, p)) in dz.row_mut(b).iter_mut().zip(q).enumerate() {
                *d = (p - if c == y { 1.0 } else { 0.0 }) * inv;
            }
        }
        losses.push(loss * inv);
        grads.push(dz);
    }
    Ok((losses, grads))
}

/// `L_u^h = 1/n * sum_b W_b^h * CE(label_b^h, Q_b^h)` over the strong view,
/// normalized by the full batch size `n`. Pseudo-labels are fixed targets.
pub fn unsupervised_loss(
    strong: &HeadPredictions,
    decisions: &[Vec<PlwmDecision>],
) -> Result<(Vec<f64>, Vec<RealMatrix>)> {
    let n = strong.num_samples();
    if decisions.len() != strong.num_heads() {
        return Err(invalid("one decision list per head is required"));
    }
    let inv = 1.0 / n.max(1) as f64;
    let mut losses = Vec::with_capacity(decisions.len());
    let mut grads = Vec::with_capacity(decisions.len());
    for (h, ds) in decisions.iter().enumerate() {
        if ds.len() != n {
            return Err(invalid("decision count differs from batch size"));
        }
        let mut loss = 0.0;
        let mut dz = RealMatrix::zeros(n, strong.num_classes());
        for (b, d) in ds.iter().enumerate() {
            let Some(label) = d.pseudo_label.filter(|_| d.weight > 0.0) else {
                continue;
            };
            let q = strong.probs_of(h, b);
            loss += d.weight * cross_entropy(label, q)?;
            let scale = d.weight * inv;
            for (c, (g, p)) in dz.row_mut(b).iter_mut().zip(q).enumerate() {
                *g = (p - if c == label { 1.0 } else { 0.0 }) * scale;
            }
        }
        losses.push(loss * inv);
        grads.push(dz);
    }
    Ok((losses, grads))
}

/// Fraction of `samples` misclassified by the head ensemble, or by the
/// auxiliary balanced classifier when one is given.
pub fn evaluate(model: &ModelState, samples: &[Sample], abc: Option<&AbcState>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySet("evaluation set"));
    }
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
    let x = RealMatrix::from_rows(&rows, model.config.input_dim)?;
    let predicted: Vec<usize> = match abc {
        Some(abc) => abc.predict(&model.features(&x)?),
        None => model
            .predict(&x)?
            .ensemble_logits()
            .iter_rows()
            .map(argmax_unchecked)
            .collect(),
    };
    let wrong = predicted
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p != s.true_label)
        .count();
    Ok(wrong as f64 / samples.len() as f64)
}

/// Mutable state of a run; everything a checkpoint needs to resume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub model: ModelState,
    pub optimizer: Sgd,
    pub thresholds: Vec<ThresholdState>,
    pub ledger: ApmLedger,
    pub gamma: GammaState,
    /// Single global APM threshold of the simplified margin baseline.
    pub margin_gamma: f64,
    margin_reservoir: Vec<f64>,
    pub abc: Option<AbcState>,
    abc_optimizer: Option<Sgd>,
    rng_labeled_order: SeededRng,
    rng_labeled_aug: SeededRng,
    rng_unlabeled_order: SeededRng,
    rng_unlabeled_aug: SeededRng,
    rng_abc: SeededRng,
    labeled_order: Vec<usize>,
    labeled_cursor: usize,
    pub step: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaTraceRow {
    pub epoch: usize,
    pub head: usize,
    pub class: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTraceRow {
    pub step: u64,
    pub head: usize,
    pub sample_id: usize,
    pub category: Category,
    pub weight: f64,
    pub pseudo_label: Option<usize>,
    pub true_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub final_test_error: f64,
    pub gamma_trace: Vec<GammaTraceRow>,
    pub decision_trace: Vec<DecisionTraceRow>,
}

const STREAM_INIT: u64 = 0;
const STREAM_LABELED_ORDER: u64 = 1;
const STREAM_LABELED_AUG: u64 = 2;
const STREAM_UNLABELED_ORDER: u64 = 3;
const STREAM_UNLABELED_AUG: u64 = 4;
const STREAM_ABC_INIT: u64 = 5;
const STREAM_ABC_MASK: u64 = 6;

pub const CHECKPOINT_FORMAT: &str = "multimatch-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized run: configuration plus full trainer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub augmentor: Augmentor,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

pub struct Trainer<'d> {
    config: TrainConfig,
    data: &'d Split,
    augmentor: Augmentor,
    state: TrainerState,
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, data: &'d Split, augmentor: Augmentor, num_classes: usize) -> Result<Self> {
        config.validate()?;
        augmentor.validate()?;
        if data.labeled.is_empty() {
            return Err(invalid("labeled set is empty"));
        }
        let input_dim = data.labeled[0].features.len();
        let heads = config.algorithm.num_heads(config.num_heads);
        let model_cfg = ModelConfig {
            input_dim,
            hidden_dims: config.hidden_dims.clone(),
            num_classes,
            num_heads: heads,
            activation: config.activation,
            weight_init_scale: config.init_scale,
        };
        let seed = config.seed;
        let model = ModelState::new(model_cfg, &mut SeededRng::stream(seed, STREAM_INIT))?;
        let n_unlabeled = data.unlabeled.len();
        let (ledger_heads, gamma_heads, threshold_heads) = match config.algorithm {
            Algorithm::MultiMatch => (3, 3, 3),
            Algorithm::MarginMatchSimplified => (1, 0, 0),
            Algorithm::FreeMatch => (0, 0, 1),
            _ => (0, 0, 0),
        };
        let ledger = ApmLedger::new(ledger_heads, n_unlabeled, num_classes, config.lambda_m)?;
        let gamma = GammaState::new(gamma_heads, num_classes, config.percentile, config.gamma_floor)?;
        let thresholds = (0..threshold_heads)
            .map(|_| ThresholdState::new(num_classes, config.lambda_f))
            .collect::<Result<Vec<_>>>()?;
        let (abc, abc_optimizer) = if config.abc {
            let counts = data.labeled_class_counts(num_classes);
            let state = AbcState::new(
                model.config.feature_dim(),
                &counts,
                config.abc_loss_weight,
                config.init_scale,
                &mut SeededRng::stream(seed, STREAM_ABC_INIT),
            )?;
            (Some(state), Some(Sgd::new(config.optimizer)?))
        } else {
            (None, None)
        };
        let state = TrainerState {
            model,
            optimizer: Sgd::new(config.optimizer)?,
            thresholds,
            ledger,
            gamma,
            margin_gamma: config.gamma_floor.initial(),
            margin_reservoir: Vec::new(),
            abc,
            abc_optimizer,
            rng_labeled_order: SeededRng::stream(seed, STREAM_LABELED_ORDER),
            rng_labeled_aug: SeededRng::stream(seed, STREAM_LABELED_AUG),
            rng_unlabeled_order: SeededRng::stream(seed, STREAM_UNLABELED_ORDER),
            rng_unlabeled_aug: SeededRng::stream(seed, STREAM_UNLABELED_AUG),
            rng_abc: SeededRng::stream(seed, STREAM_ABC_MASK),
            labeled_order: Vec::new(),
            labeled_cursor: 0,
            step: 0,
            epoch: 0,
        };
        Ok(Self {
            config,
            data,
            augmentor,
            state,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, data: &'d Split) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Self {
            config: ckpt.config,
            data,
            augmentor: ckpt.augmentor,
            state: ckpt.state,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            augmentor: self.augmentor,
            state: self.state.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    /// Mutable access for tests and tools that need to stage specific states.
    pub fn state_mut(&mut self) -> &mut TrainerState {
        &mut self.state
    }

    pub fn model(&self) -> &ModelState {
        &self.state.model
    }

    fn unlabeled_batch_size(&self) -> usize {
        self.config.batch_size * self.config.mu
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.data.unlabeled.len();
        if n == 0 {
            self.data.labeled.len().div_ceil(self.config.batch_size)
        } else {
            n.div_ceil(self.unlabeled_batch_size())
        }
    }

    fn learning_rate(&self) -> f64 {
        let lr = self.config.optimizer.learning_rate;
        match self.config.schedule {
            LrSchedule::Constant => lr,
            LrSchedule::Linear => {
                let total = (self.config.epochs * self.steps_per_epoch()).max(1) as f64;
                lr * (1.0 - self.state.step as f64 / total).max(0.0)
            }
        }
    }

    /// Next `B` labeled indices from an endlessly reshuffled order.
    pub fn next_labeled_batch(&mut self) -> Vec<usize> {
        let n = self.data.labeled.len();
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.state.labeled_cursor >= self.state.labeled_order.len() {
                self.state.labeled_order = (0..n).collect();
                self.state.rng_labeled_order.shuffle(&mut self.state.labeled_order);
                self.state.labeled_cursor = 0;
            }
            batch.push(self.state.labeled_order[self.state.labeled_cursor]);
            self.state.labeled_cursor += 1;
        }
        batch
    }

    /// Pseudo-label decisions per head for the weak unlabeled view.
    fn decide(&self, weak: &HeadPredictions, ids: &[usize]) -> Result<Vec<Vec<PlwmDecision>>> {
        let simple = |h: usize, id: usize, label: usize, pass: bool| PlwmDecision {
            target_head: h,
            sample_id: id,
            pseudo_label: pass.then_some(label),
            category: if pass { Category::UsefulEasy } else { Category::NotUseful },
            weight: if pass { 1.0 } else { 0.0 },
            trace: FilterTrace::default(),
        };
        let s = &self.state;
        Ok(match self.config.algorithm {
            Algorithm::SupervisedOnly => Vec::new(),
            Algorithm::MultiMatch => {
                let fs = FilterState {
                    ledger: &s.ledger,
                    gamma: &s.gamma,
                    thresholds: &s.thresholds,
                };
                (0..3)
                    .map(|h| plwm::decide_batch(h, weak, ids, fs, &self.config.plwm).map(|(d, _)| d))
                    .collect::<Result<_>>()?
            }
            Algorithm::MultiheadCotrain => (0..3)
                .map(|h| {
                    let (i, j) = other_heads(h);
                    ids.iter()
                        .enumerate()
                        .map(|(b, &id)| {
                            let li = weak.label_of(i, b);
                            simple(h, id, li, li == weak.label_of(j, b))
                        })
                        .collect()
                })
                .collect(),
            Algorithm::FixMatch => vec![ids
                .iter()
                .enumerate()
                .map(|(b, &id)| {
                    let q = weak.probs_of(0, b);
                    let label = weak.label_of(0, b);
                    simple(0, id, label, q[label] > self.config.fixmatch_tau)
                })
                .collect()],
            Algorithm::FreeMatch => vec![ids
                .iter()
                .enumerate()
                .map(|(b, &id)| {
                    let pass = s.thresholds[0].passes_filter(weak.probs_of(0, b));
                    simple(0, id, weak.label_of(0, b), pass)
                })
                .collect()],
            Algorithm::MarginMatchSimplified => vec![ids
                .iter()
                .enumerate()
                .map(|(b, &id)| {
                    let label = weak.label_of(0, b);
                    simple(0, id, label, s.ledger.apm(0, id, label) > s.margin_gamma)
                })
                .collect()],
        })
    }

    /// One optimization step on the given labeled and unlabeled indices.
    pub fn train_step(&mut self, labeled_ids: &[usize], unlabeled_ids: &[usize]) -> Result<StepReport> {
        let step = self.state.step;
        let diverged = |reason: String| Error::TrainingDivergence { step, reason };
        let labeled: Vec<&Sample> = labeled_ids.iter().map(|&i| &self.data.labeled[i]).collect();
        let labels: Vec<usize> = labeled.iter().map(|s| s.true_label).collect();
        let x_l = self
            .augmentor
            .augment_batch(&labeled, View::Weak, &mut self.state.rng_labeled_aug);
        let (pred_l, cache_l) = self.state.model.forward(&x_l)?;
        let (loss_sup, dz_sup) = supervised_loss(&pred_l, &labels)?;

        let heads = self.state.model.num_heads();
        let use_unlabeled = self.config.algorithm.uses_unlabeled() && !unlabeled_ids.is_empty();
        let mut loss_unsup = vec![0.0; heads];
        let mut unsup = None;
        if use_unlabeled {
            let samples: Vec<&Sample> = unlabeled_ids.iter().map(|&i| &self.data.unlabeled[i]).collect();
            let ids: Vec<usize> = samples.iter().map(|s| s.id).collect();
            let x_w = self
                .augmentor
                .augment_batch(&samples, View::Weak, &mut self.state.rng_unlabeled_aug);
            let x_s = self
                .augmentor
                .augment_batch(&samples, View::Strong, &mut self.state.rng_unlabeled_aug);
            let weak = self.state.model.predict(&x_w)?;
            let (strong, cache_s) = self.state.model.forward(&x_s)?;
            let decisions = self.decide(&weak, &ids)?;
            let (losses, dz) = unsupervised_loss(&strong, &decisions)?;
            loss_unsup = losses;
            unsup = Some((samples, ids, weak, cache_s, decisions, dz));
        }

        // Auxiliary balanced classifier over labeled + included unlabeled rows.
        let mut loss_abc = 0.0;
        let mut abc_feature_grads: Option<(RealMatrix, Option<RealMatrix>)> = None;
        let mut abc_layer_grad = None;
        if let Some(abc) = &self.state.abc {
            let mut feats = cache_l.features().clone();
            let mut targets = labels.clone();
            let mut rows = Vec::new();
            if let Some((_, _, _, cache_s, decisions, _)) = &unsup {
                let fs = cache_s.features();
                let picked: Vec<&[f64]> = decisions[0]
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.weight > 0.0)
                    .map(|(b, d)| {
                        rows.push(b);
                        targets.push(d.pseudo_label.expect("included decisions carry a label"));
                        fs.row(b)
                    })
                    .collect();
                feats = feats.vstack(&RealMatrix::from_rows(&picked, fs.cols())?)?;
            }
            let out = abc.loss(&feats, &targets, &mut self.state.rng_abc)?;
            loss_abc = out.loss;
            let w = abc.loss_weight;
            let nl = labels.len();
            let fdim = feats.cols();
            let mut g_l = RealMatrix::zeros(nl, fdim);
            for b in 0..nl {
                for (d, v) in g_l.row_mut(b).iter_mut().zip(out.feature_grad.row(b)) {
                    *d = w * v;
                }
            }
            let g_s = unsup.as_ref().map(|(_, ids, ..)| {
                let mut g = RealMatrix::zeros(ids.len(), fdim);
                for (k, &b) in rows.iter().enumerate() {
                    for (d, v) in g.row_mut(b).iter_mut().zip(out.feature_grad.row(nl + k)) {
                        *d = w * v;
                    }
                }
                g
            });
            abc_feature_grads = Some((g_l, g_s));
            let mut lg = out.layer_grad;
            for v in lg.weights.iter_mut().chain(lg.bias.iter_mut()) {
                *v *= w;
            }
            abc_layer_grad = Some(lg);
        }

        let w_u = self.config.w_u;
        let abc_w = self.state.abc.as_ref().map_or(0.0, |a| a.loss_weight);
        let total = loss_sup.iter().sum::<f64>() + w_u * loss_unsup.iter().sum::<f64>() + abc_w * loss_abc;
        if !total.is_finite() {
            return Err(diverged(format!("non-finite total loss {total}")));
        }

        let (fg_l, fg_s) = match abc_feature_grads {
            Some((l, s)) => (Some(l), s),
            None => (None, None),
        };
        let mut grads = self
            .state
            .model
            .backward_with_feature_grad(&cache_l, &dz_sup, fg_l.as_ref())?;
        if let Some((_, _, _, cache_s, _, dz)) = &unsup {
            if w_u != 0.0 || fg_s.is_some() {
                let scaled: Vec<RealMatrix> = dz
                    .iter()
                    .map(|m| {
                        let mut m = m.clone();
                        m.as_mut_slice().iter_mut().for_each(|v| *v *= w_u);
                        m
                    })
                    .collect();
                let g_u = self
                    .state
                    .model
                    .backward_with_feature_grad(cache_s, &scaled, fg_s.as_ref())?;
                grads.add_assign(&g_u);
            }
        }
        if !grads.is_finite() {
            return Err(diverged("non-finite gradient".into()));
        }
        let lr = self.learning_rate();
        self.state
            .optimizer
            .apply_update_with_lr(&mut self.state.model, &grads, lr)
            .map_err(|e| match e {
                Error::TrainingDivergence { reason, .. } => diverged(reason),
                other => other,
            })?;
        if let (Some(abc), Some(opt), Some(g)) = (
            self.state.abc.as_mut(),
            self.state.abc_optimizer.as_mut(),
            abc_layer_grad,
        ) {
            opt.apply(
                vec![&mut abc.layer.weights, &mut abc.layer.bias],
                &[&g.weights, &g.bias],
                lr,
            )?;
        }

        let mut categories = CategoryTally::default();
        let mut head_stats = vec![DecisionStats::default(); heads];
        let mut decisions_out = Vec::new();
        if let Some((samples, ids, weak, _, decisions, _)) = unsup {
            self.post_update(&weak, &ids)?;
            for (h, ds) in decisions.iter().enumerate() {
                for d in ds {
                    categories.add(d.category);
                }
                head_stats[h] = accumulate(ds.iter().zip(samples.iter().map(|s| s.true_label)));
            }
            if self.config.trace_decisions {
                decisions_out = decisions.into_iter().flatten().collect();
            }
        }
        self.state.step += 1;
        Ok(StepReport {
            step,
            loss_sup,
            loss_unsup,
            loss_abc,
            total,
            categories,
            head_stats,
            decisions: decisions_out,
        })
    }

    /// Ledger, threshold and reservoir updates from the pre-update weak view.
    fn post_update(&mut self, weak: &HeadPredictions, ids: &[usize]) -> Result<()> {
        let s = &mut self.state;
        match self.config.algorithm {
            Algorithm::MultiMatch => {
                for h in 0..3 {
                    for (b, &id) in ids.iter().enumerate() {
                        s.ledger.update(h, id, weak.logits_of(h, b))?;
                    }
                    s.thresholds[h].update(&weak.probs[h]);
                }
                for (b, &id) in ids.iter().enumerate() {
                    for h in 0..3 {
                        let (i, j) = other_heads(h);
                        let c = weak.label_of(i, b);
                        if c == weak.label_of(j, b) {
                            s.gamma.record_agreement_value(h, c, s.ledger.apm(i, id, c));
                            s.gamma.record_agreement_value(h, c, s.ledger.apm(j, id, c));
                        }
                    }
                }
            }
            Algorithm::FreeMatch => s.thresholds[0].update(&weak.probs[0]),
            Algorithm::MarginMatchSimplified => {
                for (b, &id) in ids.iter().enumerate() {
                    s.ledger.update(0, id, weak.logits_of(0, b))?;
                    let label = weak.label_of(0, b);
                    s.margin_reservoir.push(s.ledger.apm(0, id, label));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn end_epoch(&mut self) {
        let s = &mut self.state;
        s.gamma.recompute();
        if let Ok(p) = percentile_lower(&s.margin_reservoir, self.config.percentile) {
            s.margin_gamma = match self.config.gamma_floor {
                GammaFloor::Bound(min) => p.max(min),
                GammaFloor::Unbounded => p,
            };
        }
        s.margin_reservoir.clear();
    }

    fn gamma_means(&self) -> Vec<f64> {
        let s = &self.state;
        match self.config.algorithm {
            Algorithm::MultiMatch => (0..s.gamma.heads())
                .map(|h| (0..s.gamma.classes()).map(|c| s.gamma.gamma(h, c)).sum::<f64>() / s.gamma.classes() as f64)
                .collect(),
            Algorithm::MarginMatchSimplified => vec![s.margin_gamma],
            _ => Vec::new(),
        }
    }

    /// One pass over the shuffled unlabeled set, then evaluation.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<(EpochMetrics, Vec<DecisionTraceRow>)> {
        let n_u = self.data.unlabeled.len();
        let mut order: Vec<usize> = (0..n_u).collect();
        self.state.rng_unlabeled_order.shuffle(&mut order);
        let ub = self.unlabeled_batch_size();
        let steps = self.steps_per_epoch();
        let mut stats = DecisionStats::default();
        let mut categories = CategoryTally::default();
        let (mut sup, mut unsup) = (0.0, 0.0);
        let mut trace = Vec::new();
        for k in 0..steps {
            let u: &[usize] = if n_u == 0 {
                &[]
            } else {
                &order[k * ub..((k + 1) * ub).min(n_u)]
            };
            let l = self.next_labeled_batch();
            let report = self.train_step(&l, u)?;
            sup += report.sup_sum();
            unsup += report.unsup_sum();
            categories.merge(&report.categories);
            for hs in &report.head_stats {
                stats.merge(hs);
            }
            for d in &report.decisions {
                trace.push(DecisionTraceRow {
                    step: report.step,
                    head: d.target_head,
                    sample_id: d.sample_id,
                    category: d.category,
                    weight: d.weight,
                    pseudo_label: d.pseudo_label,
                    true_label: self.data.unlabeled[d.sample_id].true_label,
                });
            }
            on_step(&report);
        }
        self.end_epoch();
        self.state.epoch += 1;
        let abc = self.state.abc.as_ref();
        let val_error = if self.data.validation.is_empty() {
            f64::NAN
        } else {
            evaluate(&self.state.model, &self.data.validation, abc)?
        };
        let test_error = evaluate(&self.state.model, &self.data.test, abc)?;
        let steps = steps.max(1) as f64;
        Ok((
            EpochMetrics {
                epoch: self.state.epoch,
                loss_sup: sup / steps,
                loss_unsup: unsup / steps,
                mask_rate: stats.mask_rate(),
                impurity: stats.impurity(),
                impurity_defined: stats.impurity_defined(),
                val_error,
                test_error,
                stats,
                categories,
                gamma_mean: self.gamma_means(),
            },
            trace,
        ))
    }

    /// Trains the remaining epochs.
    pub fn train(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<RunResult> {
        let mut epochs = Vec::new();
        let mut gamma_trace = Vec::new();
        let mut decision_trace = Vec::new();
        while self.state.epoch < self.config.epochs {
            let (m, trace) = self.run_epoch(&mut on_step)?;
            let g = &self.state.gamma;
            for h in 0..g.heads() {
                for c in 0..g.classes() {
                    gamma_trace.push(GammaTraceRow {
                        epoch: m.epoch,
                        head: h,
                        class: c,
                        gamma: g.gamma(h, c),
                    });
                }
            }
            decision_trace.extend(trace);
            epochs.push(m);
        }
        let final_test_error = match epochs.last() {
            Some(m) => m.test_error,
            None => evaluate(&self.state.model, &self.data.test, self.state.abc.as_ref())?,
        };
        Ok(RunResult {
            algorithm: self.config.algorithm,
            seed: self.config.seed,
            epochs,
            final_test_error,
            gamma_trace,
            decision_trace,
        })
    }

    /// Losses of one step on fixed batches without touching any state.
    pub fn probe_losses(&self, labeled_ids: &[usize], unlabeled_ids: &[usize]) -> Result<StepReport> {
        let mut scratch = Trainer {
            config: self.config.clone(),
            data: self.data,
            augmentor: self.augmentor,
            state: self.state.clone(),
        };
        scratch.train_step(labeled_ids, unlabeled_ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_gaussian_task, make_split, SplitSpec};

    fn data(seed: u64) -> Split {
        let task = make_gaussian_task(4, 8, 3.0, &mut SeededRng::new(seed)).unwrap();
        make_split(&task, &SplitSpec::balanced(4, 4, 16, 8, 40), &mut SeededRng::new(seed + 1)).unwrap()
    }

    fn cfg(alg: Algorithm) -> TrainConfig {
        TrainConfig {
            algorithm: alg,
            epochs: 2,
            hidden_dims: vec![6],
            ..TrainConfig::default()
        }
    }

    fn aug() -> Augmentor {
        Augmentor::default_for(3.0, 8)
    }

    #[test]
    fn uniform_supervised_loss_is_ln_c() {
        let z = RealMatrix::zeros(3, 4);
        let preds = HeadPredictions::from_logits(vec![z.clone(), z]);
        let (l, _) = supervised_loss(&preds, &[0, 1, 3]).unwrap();
        for v in l {
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_have_tiny_loss() {
        let mut z = RealMatrix::zeros(2, 3);
        z.set(0, 1, 50.0);
        z.set(1, 2, 50.0);
        let preds = HeadPredictions::from_logits(vec![z]);
        let (l, _) = supervised_loss(&preds, &[1, 2]).unwrap();
        assert!(l[0] < 1e-20);
    }

    fn dec(weight: f64, label: Option<usize>) -> PlwmDecision {
        PlwmDecision {
            target_head: 0,
            sample_id: 0,
            pseudo_label: label,
            category: Category::UsefulDifficult,
            weight,
            trace: FilterTrace::default(),
        }
    }

    #[test]
    fn unsupervised_loss_normalizes_by_batch() {
        let mut z = RealMatrix::zeros(8, 3);
        z.set(2, 0, 1.0);
        let strong = HeadPredictions::from_logits(vec![z]);
        let mut ds = vec![dec(0.0, None); 8];
        ds[2] = dec(3.0, Some(1));
        let (l, g) = unsupervised_loss(&strong, &[ds]).unwrap();
        let ell = cross_entropy(1, strong.probs_of(0, 2)).unwrap();
        assert!((l[0] - 3.0 * ell / 8.0).abs() < 1e-15);
        for b in 0..8 {
            if b != 2 {
                assert!(g[0].row(b).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn all_zero_weights_give_zero_unsup() {
        let strong = HeadPredictions::from_logits(vec![RealMatrix::zeros(4, 3)]);
        let (l, g) = unsupervised_loss(&strong, &[vec![dec(0.0, None); 4]]).unwrap();
        assert_eq!(l, vec![0.0]);
        assert!(g[0].as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("sequencematch".parse::<Algorithm>().is_err());
    }

    #[test]
    fn fixmatch_with_zero_tau_keeps_everything() {
        let d = data(1);
        let mut t = Trainer::new(TrainConfig { fixmatch_tau: 0.0, ..cfg(Algorithm::FixMatch) }, &d, aug(), 4).unwrap();
        let l = t.next_labeled_batch();
        let r = t.train_step(&l, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(r.head_stats[0].masked, 0);
        assert_eq!(r.head_stats[0].decisions, 8);
    }

    #[test]
    fn freematch_masks_everything_on_uniform_start() {
        let d = data(2);
        let mut c = cfg(Algorithm::FreeMatch);
        c.init_scale = 0.0;
        let mut t = Trainer::new(c, &d, aug(), 4).unwrap();
        let l = t.next_labeled_batch();
        let r = t.train_step(&l, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(r.head_stats[0].masked, 8);
    }

    #[test]
    fn cotrain_with_unanimous_heads_masks_nothing() {
        let d = data(3);
        let mut t = Trainer::new(cfg(Algorithm::MultiheadCotrain), &d, aug(), 4).unwrap();
        // identical heads always agree
        let h0 = t.state.model.heads[0].clone();
        t.state.model.heads[1] = h0.clone();
        t.state.model.heads[2] = h0;
        let l = t.next_labeled_batch();
        let r = t.train_step(&l, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert!(r.head_stats.iter().all(|s| s.masked == 0));
    }

    #[test]
    fn multimatch_first_epoch_is_fully_masked() {
        // APM starts at 0 and gamma at 0, so nobody is APM-confident yet.
        let d = data(4);
        let mut t = Trainer::new(cfg(Algorithm::MultiMatch), &d, aug(), 4).unwrap();
        let (m, _) = t.run_epoch(|_| {}).unwrap();
        assert_eq!(m.mask_rate, 1.0);
        assert_eq!(m.stats.decisions, 3 * 16 * 4);
    }

    #[test]
    fn multimatch_rejects_two_heads() {
        let d = data(5);
        let c = TrainConfig { num_heads: 2, ..cfg(Algorithm::MultiMatch) };
        assert!(matches!(Trainer::new(c, &d, aug(), 4), Err(Error::UnsupportedConfiguration(_))));
    }

    #[test]
    fn loss_decomposition_holds() {
        let d = data(6);
        let mut t = Trainer::new(TrainConfig { w_u: 0.7, epochs: 3, ..cfg(Algorithm::MultiMatch) }, &d, aug(), 4).unwrap();
        t.train(|r| {
            let expect = r.sup_sum() + 0.7 * r.unsup_sum();
            assert!((r.total - expect).abs() < 1e-9);
        })
        .unwrap();
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let d = data(7);
        let c = TrainConfig { epochs: 3, ..cfg(Algorithm::MultiMatch) };
        let mut full = Trainer::new(c.clone(), &d, aug(), 4).unwrap();
        full.train(|_| {}).unwrap();

        let mut first = Trainer::new(c, &d, aug(), 4).unwrap();
        first.run_epoch(|_| {}).unwrap();
        let text = first.checkpoint().to_json().unwrap();
        let restored = Checkpoint::from_json(&text).unwrap();
        assert_eq!(restored.state, first.state);
        let mut resumed = Trainer::from_checkpoint(restored, &d).unwrap();
        resumed.train(|_| {}).unwrap();
        assert_eq!(resumed.state.model, full.state.model);
        assert_eq!(resumed.state.gamma, full.state.gamma);
    }

    #[test]
    fn evaluate_examples() {
        let d = data(8);
        let mut t = Trainer::new(cfg(Algorithm::SupervisedOnly), &d, aug(), 4).unwrap();
        t.train(|_| {}).unwrap();
        let e = evaluate(t.model(), &d.test, None).unwrap();
        let doubled: Vec<Sample> = d.test.iter().chain(&d.test).cloned().collect();
        assert_eq!(evaluate(t.model(), &doubled, None).unwrap(), e);
        assert!(evaluate(t.model(), &[], None).is_err());
    }
}
