//! Balanced 4-class comparison on a Gaussian task.
//!
//! Knobs come from the environment: `DIM`, `SEP`, `EPOCHS`, `LR`, `HIDDEN`,
//! `SEEDS`, `SEED_OFFSET`, `ALGS` (comma-separated algorithm names), `GAMMA`
//! (long-tail imbalance; 0 for balanced) and `LARGEST`.

use std::env;
use std::time::Instant;

use multimatch_core::datagen::{
    long_tail_counts, make_gaussian_task, make_split, Augmentor, LongTailSpec, SplitSpec,
};
use multimatch_core::{Algorithm, SeededRng, TrainConfig, Trainer};

fn var<T: std::str::FromStr>(key: &str, default: T) -> T {
    env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> multimatch_core::Result<()> {
    let dim: usize = var("DIM", 48);
    let sep: f64 = var("SEP", 4.0);
    let epochs: usize = var("EPOCHS", 20);
    let lr: f64 = var("LR", 0.01);
    let hidden: usize = var("HIDDEN", 32);
    let seeds: u64 = var("SEEDS", 5);
    let gamma: f64 = var("GAMMA", 0.0);
    let offset: u64 = var("SEED_OFFSET", 0);
    let algs: Vec<Algorithm> = env::var("ALGS")
        .unwrap_or_else(|_| "supervised_only,fixmatch,multihead_cotrain,multimatch".into())
        .split(',')
        .map(|s| s.parse())
        .collect::<Result<_, _>>()?;
    for alg in algs {
        let mut errs = Vec::new();
        let mut masks = Vec::new();
        let mut imps = Vec::new();
        let start = Instant::now();
        for seed in (1 + offset)..=(seeds + offset) {
            let task = make_gaussian_task(4, dim, sep, &mut SeededRng::stream(seed, 100))?;
            let mut spec = SplitSpec::balanced(4, 10, 500, 100, 1000);
            if gamma != 0.0 {
                let lt = long_tail_counts(&LongTailSpec {
                    num_classes: 4,
                    largest: var("LARGEST", 100),
                    gamma_imb: gamma,
                    unlabeled_multiplier: 10,
                })?;
                spec.labeled_per_class = lt.labeled;
                spec.unlabeled_per_class = lt.unlabeled;
            }
            let split = make_split(&task, &spec, &mut SeededRng::stream(seed, 101))?;
            let mut cfg = TrainConfig {
                algorithm: alg,
                epochs,
                seed,
                hidden_dims: vec![hidden],
                ..TrainConfig::default()
            };
            cfg.optimizer.learning_rate = lr;
            let mut t = Trainer::new(cfg, &split, Augmentor::default_for(sep, dim), 4)?;
            let r = t.train(|_| {})?;
            let last = r.epochs.last().expect("at least one epoch");
            errs.push(r.final_test_error);
            masks.push(last.mask_rate);
            imps.push(last.impurity);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{:<24} err {:.4} mask {:.4} impurity {:.4} ({:.1}s/run) {:?}",
            alg.name(),
            mean(&errs),
            mean(&masks),
            mean(&imps),
            start.elapsed().as_secs_f64() / seeds as f64,
            errs
        );
    }
    Ok(())
}
