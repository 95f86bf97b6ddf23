//! Synthetic classification tasks, weak/strong augmentation and
//! balanced / long-tail / reversed long-tail labeled-unlabeled splits.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numkit::{RealMatrix, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Dense `0..N` within its own set; stable across epochs.
    pub id: usize,
    pub features: Vec<f64>,
    pub true_label: usize,
}

/// Isotropic unit-variance Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTask {
    pub num_classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub means: Vec<Vec<f64>>,
}

/// Builds a task whose class means are at pairwise distance `>= separation`.
///
/// With `input_dim >= C` the means sit on scaled orthogonal axes, so every
/// pair is exactly `separation` apart; with fewer dimensions they are spread
/// along the first axis (or on a circle in the first two).
pub fn make_gaussian_task(
    num_classes: usize,
    input_dim: usize,
    separation: f64,
    rng: &mut SeededRng,
) -> Result<GaussianTask> {
    if num_classes < 2 {
        return Err(invalid("task needs at least two classes"));
    }
    if input_dim == 0 {
        return Err(invalid("task needs at least one dimension"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(invalid("class separation must be finite and >= 0"));
    }
    let mut means = vec![vec![0.0; input_dim]; num_classes];
    if input_dim >= num_classes {
        // Random axis assignment keeps tasks from always using the first C dims.
        let mut axes: Vec<usize> = (0..input_dim).collect();
        rng.shuffle(&mut axes);
        let r = separation / std::f64::consts::SQRT_2;
        for (c, m) in means.iter_mut().enumerate() {
            m[axes[c]] = r;
        }
    } else if input_dim == 1 {
        for (c, m) in means.iter_mut().enumerate() {
            m[0] = c as f64 * separation;
        }
    } else {
        let step = std::f64::consts::TAU / num_classes as f64;
        let r = separation / (2.0 * (step / 2.0).sin());
        for (c, m) in means.iter_mut().enumerate() {
            m[0] = r * (c as f64 * step).cos();
            m[1] = r * (c as f64 * step).sin();
        }
    }
    Ok(GaussianTask {
        num_classes,
        input_dim,
        separation,
        means,
    })
}

impl GaussianTask {
    pub fn draw(&self, class: usize, rng: &mut SeededRng) -> Vec<f64> {
        self.means[class].iter().map(|m| m + rng.normal()).collect()
    }

    /// Endless stream with labels cycling `0, 1, .., C-1, 0, ..`.
    pub fn stream<'a>(&'a self, rng: &'a mut SeededRng) -> impl Iterator<Item = Sample> + 'a {
        (0..).map(move |i: usize| {
            let label = i % self.num_classes;
            Sample {
                id: i,
                features: self.draw(label, rng),
                true_label: label,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_per_class: Vec<usize>,
    pub unlabeled_per_class: Vec<usize>,
    pub validation: usize,
    pub test: usize,
}

impl SplitSpec {
    pub fn balanced(classes: usize, labeled: usize, unlabeled: usize, validation: usize, test: usize) -> Self {
        Self {
            labeled_per_class: vec![labeled; classes],
            unlabeled_per_class: vec![unlabeled; classes],
            validation,
            test,
        }
    }

    pub fn validate(&self, num_classes: usize, require_unlabeled: bool) -> Result<()> {
        if self.labeled_per_class.len() != num_classes || self.unlabeled_per_class.len() != num_classes {
            return Err(invalid(format!("split must list counts for {num_classes} classes")));
        }
        if require_unlabeled && self.unlabeled_per_class.contains(&0) {
            return Err(invalid("every class needs at least one unlabeled sample"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub largest: usize,
    /// Positive: unlabeled follows the labeled tail. Negative: reversed.
    pub gamma_imb: f64,
    pub unlabeled_multiplier: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongTailCounts {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Classes whose rounded count had to be raised to 1.
    pub clamped: usize,
}

impl LongTailCounts {
    pub fn is_degenerate(&self) -> bool {
        self.clamped * 2 > self.labeled.len()
    }
}

/// `N_c = round(N1 * |gamma|^(-(c-1)/(C-1)))`, half-up, clamped to `>= 1`.
pub fn long_tail_counts(spec: &LongTailSpec) -> Result<LongTailCounts> {
    let c = spec.num_classes;
    if c < 2 {
        return Err(invalid("long tail needs at least two classes"));
    }
    if !(spec.gamma_imb.abs() > 1.0 && spec.gamma_imb.is_finite()) {
        return Err(invalid("imbalance factor must satisfy |gamma| > 1"));
    }
    if spec.largest == 0 {
        return Err(invalid("largest class count must be positive"));
    }
    let g = spec.gamma_imb.abs();
    let mut clamped = 0;
    let labeled: Vec<usize> = (0..c)
        .map(|k| {
            let raw = spec.largest as f64 * g.powf(-(k as f64) / (c - 1) as f64);
            let n = (raw + 0.5).floor() as usize;
            if n < 1 {
                clamped += 1;
                1
            } else {
                n
            }
        })
        .collect();
    let mut unlabeled: Vec<usize> = labeled
        .iter()
        .map(|n| n * spec.unlabeled_multiplier)
        .collect();
    if spec.gamma_imb < 0.0 {
        unlabeled.reverse();
    }
    let counts = LongTailCounts {
        labeled,
        unlabeled,
        clamped,
    };
    if counts.is_degenerate() {
        log::warn!(
            "degenerate long-tail spec: {} of {} classes clamped to one sample",
            counts.clamped,
            c
        );
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeakAug {
    Identity,
    GaussianNoise { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StrongAug {
    GaussianNoise { sigma: f64 },
    FeatureDropout { p: f64 },
    Both { sigma: f64, p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentor {
    pub weak: WeakAug,
    pub strong: StrongAug,
}

impl Augmentor {
    /// Default strong view: noise `0.5 * separation / sqrt(dim)` plus 10% dropout.
    pub fn default_for(separation: f64, dim: usize) -> Self {
        Self {
            weak: WeakAug::Identity,
            strong: StrongAug::Both {
                sigma: 0.5 * separation / (dim as f64).sqrt(),
                p: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sw = match self.weak {
            WeakAug::Identity => 0.0,
            WeakAug::GaussianNoise { sigma } => sigma,
        };
        let (ss, p) = match self.strong {
            StrongAug::GaussianNoise { sigma } => (sigma, 0.0),
            StrongAug::FeatureDropout { p } => (0.0, p),
            StrongAug::Both { sigma, p } => (sigma, p),
        };
        if !(sw >= 0.0 && ss >= 0.0 && (0.0..=1.0).contains(&p)) {
            return Err(invalid("augmentation magnitudes out of range"));
        }
        if !(ss > sw || (p > 0.0 && ss >= sw)) {
            return Err(invalid("strong augmentation must exceed the weak one"));
        }
        Ok(())
    }

    pub fn augment(&self, features: &[f64], view: View, rng: &mut SeededRng) -> Vec<f64> {
        let mut out = features.to_vec();
        match view {
            View::Weak => match self.weak {
                WeakAug::Identity => {}
                WeakAug::GaussianNoise { sigma } => add_noise(&mut out, sigma, rng),
            },
            View::Strong => match self.strong {
                StrongAug::GaussianNoise { sigma } => add_noise(&mut out, sigma, rng),
                StrongAug::FeatureDropout { p } => dropout(&mut out, p, rng),
                StrongAug::Both { sigma, p } => {
                    add_noise(&mut out, sigma, rng);
                    dropout(&mut out, p, rng);
                }
            },
        }
        out
    }

    /// Augments a batch of samples into a feature matrix.
    pub fn augment_batch(&self, samples: &[&Sample], view: View, rng: &mut SeededRng) -> RealMatrix {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut data = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            data.extend(self.augment(&s.features, view, rng));
        }
        RealMatrix::from_vec(samples.len(), dim, data).expect("augmented features are finite")
    }
}

fn add_noise(x: &mut [f64], sigma: f64, rng: &mut SeededRng) {
    for v in x.iter_mut() {
        *v += sigma * rng.normal();
    }
}

fn dropout(x: &mut [f64], p: f64, rng: &mut SeededRng) {
    for v in x.iter_mut() {
        if rng.bernoulli(p) {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Split {
    pub fn labeled_class_counts(&self, num_classes: usize) -> Vec<usize> {
        class_counts(&self.labeled, num_classes)
    }
}

pub fn class_counts(samples: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in samples {
        counts[s.true_label] += 1;
    }
    counts
}

fn balanced_counts(total: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| total / classes + usize::from(c < total % classes))
        .collect()
}

/// Draws disjoint labeled, unlabeled, validation and test sets with exact
/// per-class counts. Validation and test are always balanced.
pub fn make_split(task: &GaussianTask, spec: &SplitSpec, rng: &mut SeededRng) -> Result<Split> {
    let c = task.num_classes;
    spec.validate(c, false)?;
    let draw_set = |counts: &[usize], rng: &mut SeededRng| {
        let mut set = Vec::with_capacity(counts.iter().sum());
        for (label, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                set.push(Sample {
                    id: 0,
                    features: task.draw(label, rng),
                    true_label: label,
                });
            }
        }
        rng.shuffle(&mut set);
        for (i, s) in set.iter_mut().enumerate() {
            s.id = i;
        }
        set
    };
    let labeled = draw_set(&spec.labeled_per_class, rng);
    let unlabeled = draw_set(&spec.unlabeled_per_class, rng);
    let validation = draw_set(&balanced_counts(spec.validation, c), rng);
    let test = draw_set(&balanced_counts(spec.test, c), rng);
    Ok(Split {
        labeled,
        unlabeled,
        validation,
        test,
    })
}

/// Writes `id,split,true_label,f0..f{d-1}`.
pub fn write_split_csv<W: Write>(split: &Split, out: W) -> Result<()> {
    let dim = [&split.labeled, &split.unlabeled, &split.validation, &split.test]
        .iter()
        .find_map(|s| s.first())
        .map_or(0, |s| s.features.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "split".into(), "true_label".into()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (name, set) in [
        ("labeled", &split.labeled),
        ("unlabeled", &split.unlabeled),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        for s in set {
            let mut rec = vec![s.id.to_string(), name.to_string(), s.true_label.to_string()];
            rec.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_split_csv<R: Read>(input: R) -> Result<Split> {
    let mut r = csv::Reader::from_reader(input);
    let mut split = Split::default();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| invalid(format!("dataset row {}: bad {what}", line + 2));
        let id = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("id"))?;
        let label = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| bad("true_label"))?;
        let features = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("feature"))?;
        let sample = Sample {
            id,
            features,
            true_label: label,
        };
        match rec.get(1) {
            Some("labeled") => split.labeled.push(sample),
            Some("unlabeled") => split.unlabeled.push(sample),
            Some("validation") => split.validation.push(sample),
            Some("test") => split.test.push(sample),
            _ => return Err(bad("split name")),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lt(gamma: f64) -> LongTailSpec {
        LongTailSpec {
            num_classes: 5,
            largest: 1000,
            gamma_imb: gamma,
            unlabeled_multiplier: 10,
        }
    }

    #[test]
    fn long_tail_examples() {
        let a = long_tail_counts(&lt(100.0)).unwrap();
        assert_eq!(a.labeled, vec![1000, 316, 100, 32, 10]);
        assert_eq!(a.unlabeled, vec![10000, 3160, 1000, 320, 100]);
        let r = long_tail_counts(&lt(-100.0)).unwrap();
        assert_eq!(r.labeled, vec![1000, 316, 100, 32, 10]);
        assert_eq!(r.unlabeled, vec![100, 320, 1000, 3160, 10000]);
        assert!(!a.is_degenerate());
    }

    #[test]
    fn long_tail_rejects_small_gamma() {
        assert!(long_tail_counts(&lt(1.0)).is_err());
        assert!(long_tail_counts(&lt(-0.5)).is_err());
    }

    #[test]
    fn long_tail_degenerate_flag() {
        let spec = LongTailSpec {
            num_classes: 5,
            largest: 2,
            gamma_imb: 1000.0,
            unlabeled_multiplier: 10,
        };
        let c = long_tail_counts(&spec).unwrap();
        assert!(c.labeled.iter().all(|&n| n >= 1));
        assert!(c.is_degenerate());
    }

    #[test]
    fn augmentation_examples() {
        let mut rng = SeededRng::new(0);
        let x = vec![1.0, -2.0, 3.5];
        let a = Augmentor {
            weak: WeakAug::Identity,
            strong: StrongAug::GaussianNoise { sigma: 0.0 },
        };
        assert_eq!(a.augment(&x, View::Weak, &mut rng), x);
        assert_eq!(a.augment(&x, View::Strong, &mut rng), x);
        let d = Augmentor {
            weak: WeakAug::GaussianNoise { sigma: 0.0 },
            strong: StrongAug::FeatureDropout { p: 1.0 },
        };
        assert_eq!(d.augment(&x, View::Weak, &mut rng), x);
        assert_eq!(d.augment(&x, View::Strong, &mut rng), vec![0.0; 3]);
    }

    #[test]
    fn augmentor_validation() {
        assert!(Augmentor::default_for(4.0, 8).validate().is_ok());
        let bad = Augmentor {
            weak: WeakAug::GaussianNoise { sigma: 1.0 },
            strong: StrongAug::GaussianNoise { sigma: 0.5 },
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn task_means_are_separated() {
        for (c, d) in [(4, 8), (4, 2), (3, 1), (5, 5)] {
            let t = make_gaussian_task(c, d, 3.0, &mut SeededRng::new(1)).unwrap();
            for i in 0..c {
                for j in i + 1..c {
                    let dist: f64 = t.means[i]
                        .iter()
                        .zip(&t.means[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist >= 3.0 - 1e-9, "C={c} d={d}: {dist}");
                }
            }
        }
    }

    #[test]
    fn stream_is_deterministic_and_balanced() {
        let t = make_gaussian_task(3, 4, 2.0, &mut SeededRng::new(5)).unwrap();
        let mut r1 = SeededRng::new(9);
        let mut r2 = SeededRng::new(9);
        let a: Vec<Sample> = t.stream(&mut r1).take(30).collect();
        let b: Vec<Sample> = t.stream(&mut r2).take(30).collect();
        assert_eq!(a, b);
        assert_eq!(class_counts(&a, 3), vec![10, 10, 10]);
    }

    #[test]
    fn split_counts() {
        let t = make_gaussian_task(4, 6, 2.0, &mut SeededRng::new(1)).unwrap();
        let spec = SplitSpec::balanced(4, 10, 50, 40, 100);
        let s1 = make_split(&t, &spec, &mut SeededRng::new(1)).unwrap();
        let s2 = make_split(&t, &spec, &mut SeededRng::new(2)).unwrap();
        assert_eq!(s1.labeled.len(), 40);
        assert_eq!(s1.labeled_class_counts(4), vec![10; 4]);
        assert_eq!(class_counts(&s1.test, 4), vec![25; 4]);
        assert_eq!(class_counts(&s2.unlabeled, 4), vec![50; 4]);
        assert_ne!(s1.labeled, s2.labeled);
        let ids: Vec<usize> = s1.unlabeled.iter().map(|s| s.id).collect();
        assert_eq!(ids, (0..200).collect::<Vec<_>>());

        let counts = long_tail_counts(&lt(100.0)).unwrap();
        let t5 = make_gaussian_task(5, 6, 2.0, &mut SeededRng::new(1)).unwrap();
        let lt_spec = SplitSpec {
            labeled_per_class: counts.labeled,
            unlabeled_per_class: vec![1; 5],
            validation: 0,
            test: 5,
        };
        let s = make_split(&t5, &lt_spec, &mut SeededRng::new(3)).unwrap();
        assert_eq!(s.labeled.len(), 1458);
    }

    #[test]
    fn csv_round_trip() {
        let t = make_gaussian_task(3, 4, 2.0, &mut SeededRng::new(1)).unwrap();
        let s = make_split(&t, &SplitSpec::balanced(3, 2, 3, 3, 3), &mut SeededRng::new(4)).unwrap();
        let mut buf = Vec::new();
        write_split_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,split,true_label,f0,f1,f2,f3\n"));
        assert_eq!(read_split_csv(buf.as_slice()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn long_tail_shape(c in 2usize..12, n1 in 10usize..5000, g in 1.5f64..200.0, m in 1usize..20) {
            let fwd = long_tail_counts(&LongTailSpec { num_classes: c, largest: n1, gamma_imb: g, unlabeled_multiplier: m }).unwrap();
            prop_assert!(fwd.labeled.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(fwd.labeled[0], n1);
            prop_assert_eq!(fwd.unlabeled.iter().sum::<usize>(), m * fwd.labeled.iter().sum::<usize>());
            let rev = long_tail_counts(&LongTailSpec { num_classes: c, largest: n1, gamma_imb: -g, unlabeled_multiplier: m }).unwrap();
            let mut r = rev.unlabeled.clone();
            r.reverse();
            prop_assert_eq!(r, fwd.unlabeled);
        }
    }
}
