//! Flat `key=value` experiment configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected with their line number. Every key has a
//! default, so an empty file describes the balanced 4-class benchmark.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::apm::GammaFloor;
use crate::datagen::{
    long_tail_counts, make_gaussian_task, make_split, Augmentor, GaussianTask, LongTailSpec, Split,
    SplitSpec, StrongAug, WeakAug,
};
use crate::error::{Error, Result};
use crate::numkit::SeededRng;
use crate::trainer::{Algorithm, LrSchedule, RunResult, TrainConfig, Trainer};

const STREAM_TASK: u64 = 100;
const STREAM_SPLIT: u64 = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub setup: String,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub labeled_per_class: usize,
    pub unlabeled_per_class: usize,
    pub validation: usize,
    pub test: usize,
    /// Long-tail imbalance factor; 0 means balanced.
    pub longtail_gamma: f64,
    pub longtail_largest: usize,
    pub longtail_multiplier: usize,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    /// Template for every run; `algorithm` and `seed` are filled per run.
    pub train: TrainConfig,
    pub weak_sigma: f64,
    /// `None` picks a magnitude from the task geometry.
    pub strong_sigma: Option<f64>,
    pub strong_dropout: f64,
    pub output_dir: String,
    pub trace_gamma: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            setup: "balanced".into(),
            classes: 4,
            dim: 48,
            separation: 4.0,
            labeled_per_class: 10,
            unlabeled_per_class: 500,
            validation: 100,
            test: 1000,
            longtail_gamma: 0.0,
            longtail_largest: 100,
            longtail_multiplier: 10,
            algorithms: Algorithm::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            train: TrainConfig::default(),
            weak_sigma: 0.0,
            strong_sigma: None,
            strong_dropout: 0.1,
            output_dir: "results".into(),
            trace_gamma: false,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

fn list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err(format!("`{key}` needs at least one value"));
    }
    Ok(items)
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, got `{value}`")),
    }
}

/// All recognized keys, in documentation order.
pub const KEYS: &[&str] = &[
    "setup",
    "task.classes",
    "task.dim",
    "task.separation",
    "split.labeled_per_class",
    "split.unlabeled_per_class",
    "split.validation",
    "split.test",
    "longtail.gamma",
    "longtail.largest",
    "longtail.unlabeled_multiplier",
    "algorithms",
    "seeds",
    "model.heads",
    "model.hidden",
    "model.activation",
    "model.init_scale",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.schedule",
    "train.batch_size",
    "train.mu",
    "train.epochs",
    "train.w_u",
    "fixmatch.tau",
    "plwm.w_d",
    "apm.percentile",
    "apm.gamma_min",
    "apm.lambda_m",
    "freematch.lambda",
    "aug.weak_sigma",
    "aug.strong_sigma",
    "aug.strong_dropout",
    "abc.enabled",
    "abc.loss_weight",
    "output.dir",
    "trace.decisions",
    "trace.gamma",
];

impl ExperimentConfig {
    /// Parses a whole document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|message| Error::Config { line: i + 1, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override (line 0 in errors).
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair.split_once('=').ok_or_else(|| Error::Config {
            line: 0,
            message: format!("override `{pair}` is not key=value"),
        })?;
        self.set(key.trim(), value.trim())
            .map_err(|message| Error::Config { line: 0, message })
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "setup" => self.setup = value.to_string(),
            "task.classes" => self.classes = num(key, value)?,
            "task.dim" => self.dim = num(key, value)?,
            "task.separation" => self.separation = num(key, value)?,
            "split.labeled_per_class" => self.labeled_per_class = num(key, value)?,
            "split.unlabeled_per_class" => self.unlabeled_per_class = num(key, value)?,
            "split.validation" => self.validation = num(key, value)?,
            "split.test" => self.test = num(key, value)?,
            "longtail.gamma" => self.longtail_gamma = num(key, value)?,
            "longtail.largest" => self.longtail_largest = num(key, value)?,
            "longtail.unlabeled_multiplier" => self.longtail_multiplier = num(key, value)?,
            "algorithms" => self.algorithms = list(key, value)?,
            "seeds" => self.seeds = list(key, value)?,
            "model.heads" => t.num_heads = num(key, value)?,
            "model.hidden" => {
                t.hidden_dims = if value.is_empty() { Vec::new() } else { list(key, value)? }
            }
            "model.activation" => t.activation = num(key, value)?,
            "model.init_scale" => t.init_scale = num(key, value)?,
            "optim.lr" => t.optimizer.learning_rate = num(key, value)?,
            "optim.momentum" => t.optimizer.momentum = num(key, value)?,
            "optim.weight_decay" => t.optimizer.weight_decay = num(key, value)?,
            "optim.schedule" => t.schedule = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.mu" => t.mu = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.w_u" => t.w_u = num(key, value)?,
            "fixmatch.tau" => t.fixmatch_tau = num(key, value)?,
            "plwm.w_d" => t.plwm.w_d = num(key, value)?,
            "apm.percentile" => t.percentile = num(key, value)?,
            "apm.gamma_min" => {
                t.gamma_floor = match value {
                    "-inf" | "none" => GammaFloor::Unbounded,
                    v => GammaFloor::Bound(num(key, v)?),
                }
            }
            "apm.lambda_m" => t.lambda_m = num(key, value)?,
            "freematch.lambda" => t.lambda_f = num(key, value)?,
            "aug.weak_sigma" => self.weak_sigma = num(key, value)?,
            "aug.strong_sigma" => {
                self.strong_sigma = if value == "auto" { None } else { Some(num(key, value)?) }
            }
            "aug.strong_dropout" => self.strong_dropout = num(key, value)?,
            "abc.enabled" => t.abc = flag(key, value)?,
            "abc.loss_weight" => t.abc_loss_weight = num(key, value)?,
            "output.dir" => self.output_dir = value.to_string(),
            "trace.decisions" => t.trace_decisions = flag(key, value)?,
            "trace.gamma" => self.trace_gamma = flag(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Config { line: 0, message };
        if self.classes < 2 {
            return Err(bad("task.classes must be >= 2".into()));
        }
        if self.dim == 0 || !(self.separation > 0.0) {
            return Err(bad("task.dim and task.separation must be positive".into()));
        }
        if self.seeds.is_empty() || self.algorithms.is_empty() {
            return Err(bad("need at least one seed and one algorithm".into()));
        }
        if !(self.train.lambda_f > 0.0 && self.train.lambda_f < 1.0) {
            return Err(bad("freematch.lambda must lie in (0, 1)".into()));
        }
        if !(self.train.lambda_m > 0.0 && self.train.lambda_m <= 1.0) {
            return Err(bad("apm.lambda_m must lie in (0, 1]".into()));
        }
        if !(self.train.percentile > 0.0 && self.train.percentile <= 100.0) {
            return Err(bad("apm.percentile must lie in (0, 100]".into()));
        }
        for &alg in &self.algorithms {
            self.train_config(alg, self.seeds[0]).validate()?;
        }
        self.augmentor().validate()
    }

    pub fn augmentor(&self) -> Augmentor {
        let auto = Augmentor::default_for(self.separation, self.dim);
        let sigma = self.strong_sigma.unwrap_or(match auto.strong {
            StrongAug::Both { sigma, .. } | StrongAug::GaussianNoise { sigma } => sigma,
            StrongAug::FeatureDropout { .. } => 0.0,
        });
        Augmentor {
            weak: if self.weak_sigma > 0.0 {
                WeakAug::GaussianNoise { sigma: self.weak_sigma }
            } else {
                WeakAug::Identity
            },
            strong: match (sigma > 0.0, self.strong_dropout > 0.0) {
                (true, true) => StrongAug::Both { sigma, p: self.strong_dropout },
                (false, true) => StrongAug::FeatureDropout { p: self.strong_dropout },
                _ => StrongAug::GaussianNoise { sigma },
            },
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let mut spec = SplitSpec::balanced(
            self.classes,
            self.labeled_per_class,
            self.unlabeled_per_class,
            self.validation,
            self.test,
        );
        if self.longtail_gamma != 0.0 {
            let lt = long_tail_counts(&LongTailSpec {
                num_classes: self.classes,
                largest: self.longtail_largest,
                gamma_imb: self.longtail_gamma,
                unlabeled_multiplier: self.longtail_multiplier,
            })?;
            spec.labeled_per_class = lt.labeled;
            spec.unlabeled_per_class = lt.unlabeled;
        }
        Ok(spec)
    }

    /// Task and split for `seed`; identical for every algorithm.
    pub fn build_data(&self, seed: u64) -> Result<(GaussianTask, Split)> {
        let task = make_gaussian_task(
            self.classes,
            self.dim,
            self.separation,
            &mut SeededRng::stream(seed, STREAM_TASK),
        )?;
        let split = make_split(&task, &self.split_spec()?, &mut SeededRng::stream(seed, STREAM_SPLIT))?;
        Ok((task, split))
    }

    pub fn train_config(&self, algorithm: Algorithm, seed: u64) -> TrainConfig {
        TrainConfig {
            algorithm,
            seed,
            ..self.train.clone()
        }
    }

    pub fn run_single(&self, algorithm: Algorithm, seed: u64) -> Result<RunResult> {
        let (_, split) = self.build_data(seed)?;
        let mut trainer = Trainer::new(
            self.train_config(algorithm, seed),
            &split,
            self.augmentor(),
            self.classes,
        )?;
        trainer.train(|_| {})
    }

    /// Canonical `key=value` rendering; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let join = |v: Vec<String>| v.join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("setup", self.setup.clone());
        put("task.classes", self.classes.to_string());
        put("task.dim", self.dim.to_string());
        put("task.separation", self.separation.to_string());
        put("split.labeled_per_class", self.labeled_per_class.to_string());
        put("split.unlabeled_per_class", self.unlabeled_per_class.to_string());
        put("split.validation", self.validation.to_string());
        put("split.test", self.test.to_string());
        put("longtail.gamma", self.longtail_gamma.to_string());
        put("longtail.largest", self.longtail_largest.to_string());
        put("longtail.unlabeled_multiplier", self.longtail_multiplier.to_string());
        put("algorithms", join(self.algorithms.iter().map(|a| a.name().to_string()).collect()));
        put("seeds", join(self.seeds.iter().map(u64::to_string).collect()));
        put("model.heads", t.num_heads.to_string());
        put("model.hidden", join(t.hidden_dims.iter().map(usize::to_string).collect()));
        put("model.activation", t.activation.as_str().to_string());
        put("model.init_scale", t.init_scale.to_string());
        put("optim.lr", t.optimizer.learning_rate.to_string());
        put("optim.momentum", t.optimizer.momentum.to_string());
        put("optim.weight_decay", t.optimizer.weight_decay.to_string());
        put(
            "optim.schedule",
            match t.schedule {
                LrSchedule::Constant => "constant".into(),
                LrSchedule::Linear => "linear".into(),
            },
        );
        put("train.batch_size", t.batch_size.to_string());
        put("train.mu", t.mu.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.w_u", t.w_u.to_string());
        put("fixmatch.tau", t.fixmatch_tau.to_string());
        put("plwm.w_d", t.plwm.w_d.to_string());
        put("apm.percentile", t.percentile.to_string());
        put(
            "apm.gamma_min",
            match t.gamma_floor {
                GammaFloor::Bound(v) => v.to_string(),
                GammaFloor::Unbounded => "-inf".into(),
            },
        );
        put("apm.lambda_m", t.lambda_m.to_string());
        put("freematch.lambda", t.lambda_f.to_string());
        put("aug.weak_sigma", self.weak_sigma.to_string());
        put("aug.strong_sigma", self.strong_sigma.map_or("auto".into(), |v| v.to_string()));
        put("aug.strong_dropout", self.strong_dropout.to_string());
        put("abc.enabled", t.abc.to_string());
        put("abc.loss_weight", t.abc_loss_weight.to_string());
        put("output.dir", self.output_dir.clone());
        put("trace.decisions", t.trace_decisions.to_string());
        put("trace.gamma", self.trace_gamma.to_string());
        s
    }
}
