//! CSV tables and SVG line charts for finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{friedman_ranks, EpochMetrics, ErrorTable, RankTable};
use crate::trainer::{Algorithm, RunResult};

/// One run of a suite; failed runs keep their error message.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub setup: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub result: std::result::Result<RunResult, String>,
}

impl RunOutcome {
    pub fn new(setup: &str, algorithm: Algorithm, seed: u64, result: std::result::Result<RunResult, String>) -> Self {
        Self {
            run_id: format!("{setup}-{}-s{seed}", algorithm.name()),
            setup: setup.to_string(),
            algorithm,
            seed,
            result,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerEpochRow {
    pub run_id: String,
    pub seed: u64,
    pub algorithm: String,
    pub setup: String,
    pub epoch: usize,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub mask_rate: f64,
    pub impurity: f64,
    pub val_error: f64,
    pub test_error: f64,
    /// False when no pseudo-label passed, so `impurity` is a placeholder 0.
    pub impurity_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub algorithm: String,
    pub setup: String,
    pub seed: u64,
    pub final_test_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub algorithm: String,
    pub friedman_rank: f64,
    pub mean_error: f64,
    pub final_rank: usize,
}

fn completed(outcomes: &[RunOutcome]) -> impl Iterator<Item = (&RunOutcome, &RunResult)> {
    outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok().map(|r| (o, r)))
}

pub fn per_epoch_rows(outcomes: &[RunOutcome]) -> Vec<PerEpochRow> {
    completed(outcomes)
        .flat_map(|(o, r)| {
            r.epochs.iter().map(move |m| PerEpochRow {
                run_id: o.run_id.clone(),
                seed: o.seed,
                algorithm: o.algorithm.name().to_string(),
                setup: o.setup.clone(),
                epoch: m.epoch,
                loss_sup: m.loss_sup,
                loss_unsup: m.loss_unsup,
                mask_rate: m.mask_rate,
                impurity: m.impurity,
                val_error: m.val_error,
                test_error: m.test_error,
                impurity_defined: m.impurity_defined,
            })
        })
        .collect()
}

pub fn result_rows(outcomes: &[RunOutcome]) -> Vec<ResultRow> {
    completed(outcomes)
        .map(|(o, r)| ResultRow {
            algorithm: o.algorithm.name().to_string(),
            setup: o.setup.clone(),
            seed: o.seed,
            final_test_error: r.final_test_error,
        })
        .collect()
}

pub fn rank_rows(table: &RankTable) -> Vec<RankRow> {
    (0..table.algorithms.len())
        .map(|a| RankRow {
            algorithm: table.algorithms[a].clone(),
            friedman_rank: table.friedman[a],
            mean_error: table.mean_error[a],
            final_rank: table.final_rank[a],
        })
        .collect()
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Per-(algorithm, setup) error averaged over seeds.
pub fn error_table(rows: &[ResultRow]) -> ErrorTable {
    let mut sums: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    let mut table = ErrorTable::new();
    for r in rows {
        // register order of first appearance
        table.insert(&r.algorithm, &r.setup, f64::NAN);
        let e = sums.entry((&r.algorithm, &r.setup)).or_insert((0.0, 0));
        e.0 += r.final_test_error;
        e.1 += 1;
    }
    for ((a, s), (sum, n)) in sums {
        table.insert(a, s, sum / n as f64);
    }
    table
}

/// Joins result files; every setup must cover the same algorithm set.
pub fn merge_results(sets: &[Vec<ResultRow>]) -> Result<ErrorTable> {
    let rows: Vec<ResultRow> = sets.iter().flatten().cloned().collect();
    if rows.is_empty() {
        return Err(Error::Merge("no result rows".into()));
    }
    let mut by_setup: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in &rows {
        let algs = by_setup.entry(&r.setup).or_default();
        if !algs.contains(&r.algorithm.as_str()) {
            algs.push(&r.algorithm);
        }
    }
    let mut reference: Option<(&str, Vec<&str>)> = None;
    for (setup, algs) in &by_setup {
        let mut sorted = algs.clone();
        sorted.sort_unstable();
        match &reference {
            None => reference = Some((setup, sorted)),
            Some((first, want)) if *want != sorted => {
                return Err(Error::Merge(format!(
                    "setup `{setup}` has algorithms [{}] but `{first}` has [{}]",
                    sorted.join(", "),
                    want.join(", ")
                )))
            }
            Some(_) => {}
        }
    }
    Ok(error_table(&rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained SVG line chart. Non-finite points are skipped.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let finite = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (0.0f64, f64::NEG_INFINITY);
    for &(x, y) in finite() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y1) = (0.0, 1.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for k in 0..=4 {
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.3}</text>"##,
            left + pw,
            left - 6.0,
            sy(fy) + 4.0,
            py = sy(fy)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.1}</text>"#,
            sx(fx),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="{color}" stroke-width="2"/><text x="{}" y="{ly:.1}">{}</text>"#,
            ly - 4.0,
            lx + 18.0,
            ly - 4.0,
            lx + 24.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Seed-averaged curve of `metric` per algorithm for one setup.
pub fn metric_series(outcomes: &[RunOutcome], setup: &str, metric: fn(&EpochMetrics) -> f64) -> Vec<Series> {
    let mut order: Vec<Algorithm> = Vec::new();
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for (o, r) in completed(outcomes).filter(|(o, _)| o.setup == setup) {
        let a = match order.iter().position(|x| *x == o.algorithm) {
            Some(a) => a,
            None => {
                order.push(o.algorithm);
                order.len() - 1
            }
        };
        for m in &r.epochs {
            let e = acc.entry((a, m.epoch)).or_insert((0.0, 0));
            e.0 += metric(m);
            e.1 += 1;
        }
    }
    order
        .iter()
        .enumerate()
        .map(|(a, alg)| Series {
            name: alg.name().to_string(),
            points: acc
                .range((a, 0)..(a + 1, 0))
                .map(|(&(_, epoch), &(sum, n))| (epoch as f64, sum / n as f64))
                .collect(),
        })
        .collect()
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Ranks over completed runs; algorithms missing a setup are left out.
pub fn suite_ranks(outcomes: &[RunOutcome]) -> Result<Option<RankTable>> {
    let rows = result_rows(outcomes);
    if rows.is_empty() {
        return Ok(None);
    }
    let full = error_table(&rows);
    let mut table = ErrorTable::new();
    for a in &full.algorithms {
        if full.setups.iter().all(|s| full.get(a, s).is_some()) {
            for s in &full.setups {
                table.insert(a, s, full.get(a, s).expect("checked above"));
            }
        } else {
            log::warn!("algorithm {a} is missing a setup and is left out of the ranks");
        }
    }
    friedman_ranks(&table).map(Some)
}

/// Writes the CSV tables and one chart per metric and setup into `dir`.
pub fn emit_reports(dir: &Path, outcomes: &[RunOutcome]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    let mut buf = Vec::new();
    write_csv(&mut buf, &per_epoch_rows(outcomes))?;
    put("per_epoch.csv".into(), buf)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, &result_rows(outcomes))?;
    put("results.csv".into(), buf)?;
    let ranks = suite_ranks(outcomes)?.map(|t| rank_rows(&t)).unwrap_or_default();
    let mut buf = Vec::new();
    write_csv(&mut buf, &ranks)?;
    put("ranks.csv".into(), buf)?;

    let mut setups: Vec<&str> = Vec::new();
    for o in outcomes {
        if !setups.contains(&o.setup.as_str()) {
            setups.push(&o.setup);
        }
    }
    let metrics: [(&str, &str, fn(&EpochMetrics) -> f64); 2] = [
        ("mask_rate", "mask rate", |m| m.mask_rate),
        ("impurity", "impurity", |m| m.impurity),
    ];
    for setup in setups {
        for (key, label, f) in metrics {
            let svg = line_chart_svg(
                &format!("{label} ({setup})"),
                "epoch",
                label,
                &metric_series(outcomes, setup, f),
            );
            put(format!("{key}_{}.svg", file_safe(setup)), svg.into_bytes())?;
        }
    }

    let gamma: Vec<GammaRow> = completed(outcomes)
        .flat_map(|(o, r)| {
            r.gamma_trace.iter().map(move |g| GammaRow {
                run_id: o.run_id.clone(),
                epoch: g.epoch,
                head: g.head,
                class: g.class,
                gamma: g.gamma,
            })
        })
        .collect();
    if !gamma.is_empty() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &gamma)?;
        put("gamma_trace.csv".into(), buf)?;
    }
    let decisions: Vec<DecisionRow> = completed(outcomes)
        .flat_map(|(o, r)| {
            r.decision_trace.iter().map(move |d| DecisionRow {
                run_id: o.run_id.clone(),
                step: d.step,
                head: d.head,
                sample_id: d.sample_id,
                category: d.category.as_str(),
                weight: d.weight,
                pseudo_label: d.pseudo_label,
                true_label: d.true_label,
            })
        })
        .collect();
    if !decisions.is_empty() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &decisions)?;
        put("decisions.csv".into(), buf)?;
    }
    Ok(written)
}

#[derive(Serialize)]
struct GammaRow {
    run_id: String,
    epoch: usize,
    head: usize,
    class: usize,
    gamma: f64,
}

#[derive(Serialize)]
struct DecisionRow {
    run_id: String,
    step: u64,
    head: usize,
    sample_id: usize,
    category: &'static str,
    weight: f64,
    pseudo_label: Option<usize>,
    true_label: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Plain-text table: mean ± std test error per algorithm and setup, plus
/// Friedman rank.
pub fn summary_table(outcomes: &[RunOutcome]) -> Result<String> {
    let rows = result_rows(outcomes);
    let ranks = suite_ranks(outcomes)?;
    let mut setups: Vec<&str> = Vec::new();
    let mut algs: Vec<&str> = Vec::new();
    for r in &rows {
        if !setups.contains(&r.setup.as_str()) {
            setups.push(&r.setup);
        }
        if !algs.contains(&r.algorithm.as_str()) {
            algs.push(&r.algorithm);
        }
    }
    let mut s = String::new();
    let _ = write!(s, "{:<24}", "algorithm");
    for setup in &setups {
        let _ = write!(s, " {:>20}", setup);
    }
    let _ = writeln!(s, " {:>8}", "rank_F");
    for a in &algs {
        let _ = write!(s, "{a:<24}");
        for setup in &setups {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.algorithm == *a && r.setup == *setup)
                .map(|r| 100.0 * r.final_test_error)
                .collect();
            if v.is_empty() {
                let _ = write!(s, " {:>20}", "-");
            } else {
                let (m, sd) = mean_std(&v);
                let _ = write!(s, " {:>20}", format!("{m:.2} ± {sd:.2}"));
            }
        }
        let rank = ranks
            .as_ref()
            .and_then(|t| t.algorithms.iter().position(|x| x == a).map(|i| t.friedman[i]));
        match rank {
            Some(r) => {
                let _ = writeln!(s, " {r:>8.2}");
            }
            None => {
                let _ = writeln!(s, " {:>8}", "-");
            }
        }
    }
    let failed: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.result.is_err()).collect();
    for o in failed {
        let _ = writeln!(s, "FAILED {}: {}", o.run_id, o.result.as_ref().err().map_or("", |e| e));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DecisionStats;
    use crate::plwm::CategoryTally;

    fn epoch(e: usize, mask: f64) -> EpochMetrics {
        EpochMetrics {
            epoch: e,
            loss_sup: 1.0 / 3.0,
            loss_unsup: 0.1,
            mask_rate: mask,
            impurity: 0.05,
            impurity_defined: true,
            val_error: 0.2,
            test_error: 0.25 + e as f64 * 1e-3,
            stats: DecisionStats::default(),
            categories: CategoryTally::default(),
            gamma_mean: Vec::new(),
        }
    }

    fn outcome(alg: Algorithm, seed: u64, epochs: usize) -> RunOutcome {
        let ep: Vec<EpochMetrics> = (1..=epochs).map(|e| epoch(e, 0.1 * seed as f64)).collect();
        let final_test_error = ep.last().unwrap().test_error;
        RunOutcome::new(
            "toy",
            alg,
            seed,
            Ok(RunResult {
                algorithm: alg,
                seed,
                epochs: ep,
                final_test_error,
                gamma_trace: Vec::new(),
                decision_trace: Vec::new(),
            }),
        )
    }

    #[test]
    fn per_epoch_row_count_and_round_trip() {
        let runs = vec![
            outcome(Algorithm::FixMatch, 1, 3),
            outcome(Algorithm::MultiMatch, 1, 3),
            RunOutcome::new("toy", Algorithm::FreeMatch, 1, Err("diverged".into())),
        ];
        let rows = per_epoch_rows(&runs);
        assert_eq!(rows.len(), 6);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "run_id,seed,algorithm,setup,epoch,loss_sup,loss_unsup,mask_rate,impurity,val_error,test_error"
        ));
        let back: Vec<PerEpochRow> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn seed_means_enter_the_error_table() {
        let rows = vec![
            ResultRow { algorithm: "a".into(), setup: "s".into(), seed: 1, final_test_error: 0.2 },
            ResultRow { algorithm: "a".into(), setup: "s".into(), seed: 2, final_test_error: 0.4 },
        ];
        assert!((error_table(&rows).get("a", "s").unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn merge_rejects_mismatched_algorithms() {
        let row = |a: &str, s: &str| ResultRow { algorithm: a.into(), setup: s.into(), seed: 1, final_test_error: 0.1 };
        let ok = merge_results(&[vec![row("a", "x"), row("b", "x")], vec![row("b", "y"), row("a", "y")]]);
        assert!(ok.is_ok());
        let bad = merge_results(&[vec![row("a", "x"), row("b", "x")], vec![row("a", "y")]]);
        assert!(matches!(bad, Err(Error::Merge(_))));
    }

    #[test]
    fn chart_escapes_and_handles_empty() {
        let svg = line_chart_svg("a<b & c", "x", "y", &[]);
        assert!(svg.contains("a&lt;b &amp; c"));
        let svg = line_chart_svg(
            "t",
            "x",
            "y",
            &[Series { name: "s".into(), points: vec![(1.0, f64::NAN), (2.0, 0.5)] }],
        );
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn series_average_over_seeds() {
        let runs = vec![outcome(Algorithm::FixMatch, 1, 2), outcome(Algorithm::FixMatch, 3, 2)];
        let s = metric_series(&runs, "toy", |m| m.mask_rate);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].points.len(), 2);
        assert!((s[0].points[0].1 - 0.2).abs() < 1e-12);
    }
}
