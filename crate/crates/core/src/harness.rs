//! Evaluation, exports and multi-run experiment suites.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cass::Partition;
use crate::datagen::{fmt_f64, LabeledDataset};
use crate::error::{invalid_arg, Error, Result};
use crate::matrix::Matrix;
use crate::net::Classifier;
use crate::trainer::{ensemble_predict, run_experiment, RunRecord, TrainConfig, Variant};

/// Anything that maps a batch of inputs to class predictions.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict_batch(&self, x: &Matrix) -> Result<Vec<usize>>;
}

impl Predictor for Classifier {
    fn num_classes(&self) -> usize {
        Classifier::num_classes(self)
    }

    fn predict_batch(&self, x: &Matrix) -> Result<Vec<usize>> {
        self.predict(x)
    }
}

/// Mean-softmax ensemble of several models.
pub struct Ensemble<'a>(pub &'a [Classifier]);

impl Predictor for Ensemble<'_> {
    fn num_classes(&self) -> usize {
        self.0.first().map_or(0, |m| m.num_classes())
    }

    fn predict_batch(&self, x: &Matrix) -> Result<Vec<usize>> {
        ensemble_predict(self.0, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// Unweighted mean of the per-class accuracies of classes present in
    /// the test set.
    pub balanced_accuracy: f64,
    /// Zero for classes without test samples.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn support(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Scores predictions against the true labels of `test`.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, test: &LabeledDataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(invalid_arg("cannot evaluate on an empty test set"));
    }
    let c = test.num_classes;
    if predictor.num_classes() != c {
        return Err(invalid_arg("predictor and test set disagree on the class count"));
    }
    let truth = test.true_labels.as_ref().unwrap_or(&test.observed_labels);
    let predicted = predictor.predict_batch(&test.features)?;
    let mut confusion = vec![vec![0usize; c]; c];
    for (&t, &p) in truth.iter().zip(&predicted) {
        confusion[t][p] += 1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    let mut per_class_accuracy = vec![0.0; c];
    let mut present = 0usize;
    let mut sum = 0.0;
    for i in 0..c {
        let n: usize = confusion[i].iter().sum();
        if n > 0 {
            per_class_accuracy[i] = confusion[i][i] as f64 / n as f64;
            sum += per_class_accuracy[i];
            present += 1;
        }
    }
    Ok(EvalReport {
        overall_accuracy: correct as f64 / test.len() as f64,
        balanced_accuracy: sum / present as f64,
        per_class_accuracy,
        confusion,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// Clean and noisy counts per bin of one class's losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHistogram {
    pub edges: Vec<f64>,
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
}

impl LossHistogram {
    pub fn total(&self) -> usize {
        self.clean.iter().chain(&self.noisy).sum()
    }
}

/// Bins `losses` over `[0, upper]`; values at or above `upper` go in the
/// last bin.
pub fn loss_histogram(losses: &[f64], clean: &[bool], bins: usize, upper: f64) -> Result<LossHistogram> {
    if bins == 0 || !(upper > 0.0) {
        return Err(invalid_arg("need at least one bin and a positive range"));
    }
    if losses.len() != clean.len() {
        return Err(invalid_arg("one clean flag per loss required"));
    }
    let width = upper / bins as f64;
    let edges = (0..=bins).map(|b| b as f64 * width).collect();
    let mut h = LossHistogram {
        edges,
        clean: vec![0; bins],
        noisy: vec![0; bins],
    };
    for (&l, &c) in losses.iter().zip(clean) {
        let b = ((l.max(0.0) / width) as usize).min(bins - 1);
        if c {
            h.clean[b] += 1;
        } else {
            h.noisy[b] += 1;
        }
    }
    Ok(h)
}

/// Writes `losses_class_<c>.csv` (one row per sample) and
/// `histogram_class_<c>.csv` (binned clean/noisy counts) for every class.
/// All classes share the same bin range so they can be compared directly.
pub fn export_loss_histograms(
    losses: &[f64],
    dataset: &LabeledDataset,
    partition: &Partition,
    bins: usize,
    dir: &Path,
) -> Result<Vec<LossHistogram>> {
    if losses.len() != dataset.len() {
        return Err(invalid_arg("one loss per training sample required"));
    }
    let truly_clean = dataset.clean_flags()?;
    let selected = partition.selected_flags(dataset.len());
    let upper = losses.iter().copied().fold(0.0, f64::max).max(1e-12) * (1.0 + 1e-9);
    let mut out = Vec::with_capacity(dataset.num_classes);
    for c in 0..dataset.num_classes {
        let idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.observed_labels[i] == c).collect();
        let mut rows = String::from("loss,observed_class,is_truly_clean,selected_clean\n");
        for &i in &idx {
            let _ = writeln!(
                rows,
                "{},{},{},{}",
                fmt_f64(losses[i]),
                c,
                u8::from(truly_clean[i]),
                u8::from(selected[i])
            );
        }
        write_file(&dir.join(format!("losses_class_{c}.csv")), &rows)?;

        let class_losses: Vec<f64> = idx.iter().map(|&i| losses[i]).collect();
        let class_clean: Vec<bool> = idx.iter().map(|&i| truly_clean[i]).collect();
        let h = loss_histogram(&class_losses, &class_clean, bins, upper)?;
        let mut text = String::from("bin_low,bin_high,clean,noisy\n");
        for b in 0..bins {
            let _ = writeln!(text, "{},{},{},{}", fmt_f64(h.edges[b]), fmt_f64(h.edges[b + 1]), h.clean[b], h.noisy[b]);
        }
        write_file(&dir.join(format!("histogram_class_{c}.csv")), &text)?;
        out.push(h);
    }
    Ok(out)
}

/// Rows of `(class, train_count, test_accuracy)`, most frequent class first.
pub fn per_class_accuracy_rows(report: &EvalReport, observed_counts: &[usize]) -> Result<Vec<(usize, usize, f64)>> {
    if observed_counts.len() != report.per_class_accuracy.len() {
        return Err(invalid_arg("one training count per class required"));
    }
    let mut rows: Vec<_> = (0..observed_counts.len())
        .map(|c| (c, observed_counts[c], report.per_class_accuracy[c]))
        .collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(rows)
}

pub fn export_per_class_accuracy(report: &EvalReport, observed_counts: &[usize], path: &Path) -> Result<()> {
    let mut text = String::from("class,train_count,test_accuracy\n");
    for (c, n, a) in per_class_accuracy_rows(report, observed_counts)? {
        let _ = writeln!(text, "{c},{n},{}", fmt_f64(a));
    }
    write_file(path, &text)
}

/// Per-epoch metrics of a run as CSV.
pub fn epochs_csv(record: &RunRecord) -> String {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let opt_n = |v: Option<usize>| v.map(|n| n.to_string()).unwrap_or_default();
    let mut text = String::from(
        "epoch,phase,learning_rate,loss_labeled,loss_unlabeled,loss_reg,loss_total,num_clean,num_unlabeled,test_accuracy,test_balanced_accuracy\n",
    );
    for e in &record.epochs {
        let phase = serde_json::to_value(e.phase).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            phase,
            fmt_f64(e.learning_rate),
            fmt_f64(e.loss_labeled),
            fmt_f64(e.loss_unlabeled),
            fmt_f64(e.loss_reg),
            fmt_f64(e.loss_total),
            opt_n(e.num_clean),
            opt_n(e.num_unlabeled),
            opt(e.test_accuracy),
            opt(e.test_balanced_accuracy),
        );
    }
    text
}

/// Mean, median and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Some(Self {
            mean,
            median,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_accuracy: f64,
    pub last_accuracy: f64,
    pub best_balanced_accuracy: f64,
    pub last_balanced_accuracy: f64,
}

impl SeedResult {
    fn from_record(r: &RunRecord) -> Result<Self> {
        let get = |v: Option<f64>| v.ok_or_else(|| Error::InvalidState("run recorded no test accuracy".into()));
        Ok(Self {
            seed: r.seed,
            best_accuracy: get(r.best_accuracy)?,
            last_accuracy: get(r.last_accuracy)?,
            best_balanced_accuracy: get(r.best_balanced_accuracy)?,
            last_balanced_accuracy: get(r.last_balanced_accuracy)?,
        })
    }
}

/// Aggregate of one configuration over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub runs: Vec<SeedResult>,
    /// `(seed, error message)` for runs that did not complete.
    pub failures: Vec<(u64, String)>,
    pub best_accuracy: Option<Summary>,
    pub last_accuracy: Option<Summary>,
    pub best_balanced_accuracy: Option<Summary>,
    pub last_balanced_accuracy: Option<Summary>,
}

impl SuiteRow {
    fn new(label: String, runs: Vec<SeedResult>, failures: Vec<(u64, String)>) -> Self {
        let col = |f: fn(&SeedResult) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
        Self {
            best_accuracy: col(|r| r.best_accuracy),
            last_accuracy: col(|r| r.last_accuracy),
            best_balanced_accuracy: col(|r| r.best_balanced_accuracy),
            last_balanced_accuracy: col(|r| r.last_balanced_accuracy),
            label,
            runs,
            failures,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SuiteRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut text = String::from(
            "label,completed,failed,best_mean,best_median,last_mean,last_median,best_balanced_mean,best_balanced_median,last_balanced_mean,last_balanced_median\n",
        );
        let cell = |s: &Option<Summary>| match s {
            Some(s) => format!("{},{}", fmt_f64(s.mean), fmt_f64(s.median)),
            None => ",".into(),
        };
        for r in &self.rows {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{}",
                r.label,
                r.runs.len(),
                r.failures.len(),
                cell(&r.best_accuracy),
                cell(&r.last_accuracy),
                cell(&r.best_balanced_accuracy),
                cell(&r.last_balanced_accuracy),
            );
        }
        text
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Train and test split for one seed.
pub type DatasetPair = (LabeledDataset, LabeledDataset);

/// Completed table plus the full record of every successful run, in
/// (row, seed) order.
pub struct SuiteOutput {
    pub table: AblationTable,
    pub records: Vec<Vec<Option<RunRecord>>>,
}

fn run_grid(
    configs: Vec<(String, TrainConfig)>,
    seeds: &[u64],
    datasets: &(dyn Fn(u64) -> Result<DatasetPair> + Sync),
    threads: usize,
) -> Result<SuiteOutput> {
    if seeds.is_empty() {
        return Err(invalid_arg("need at least one seed"));
    }
    if configs.is_empty() {
        return Err(invalid_arg("need at least one configuration"));
    }
    let data: Vec<DatasetPair> = seeds.iter().map(|&s| datasets(s)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..configs.len()).flat_map(|c| (0..seeds.len()).map(move |s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, s)| {
                let mut cfg = configs[c].1.clone();
                cfg.seed = seeds[s];
                let (train, test) = &data[s];
                run_experiment(&cfg, train, test).map(|o| o.record)
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(configs.len());
    let mut records = Vec::with_capacity(configs.len());
    let mut it = results.into_iter();
    for (label, _) in configs {
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        let mut recs = Vec::new();
        for &seed in seeds {
            match it.next().expect("one result per job").and_then(|r| SeedResult::from_record(&r).map(|s| (s, r))) {
                Ok((s, r)) => {
                    runs.push(s);
                    recs.push(Some(r));
                }
                Err(e) => {
                    failures.push((seed, e.to_string()));
                    recs.push(None);
                }
            }
        }
        rows.push(SuiteRow::new(label, runs, failures));
        records.push(recs);
    }
    Ok(SuiteOutput {
        table: AblationTable {
            seeds: seeds.to_vec(),
            rows,
        },
        records,
    })
}

/// Runs every `(variant, seed)` pair and aggregates per variant. Rows keep
/// the order of `variants`.
pub fn run_ablation_suite(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    datasets: &(dyn Fn(u64) -> Result<DatasetPair> + Sync),
    threads: usize,
) -> Result<SuiteOutput> {
    let configs = variants
        .iter()
        .map(|&v| {
            let cfg = TrainConfig {
                variant: v,
                ..base.clone()
            };
            (v.name().to_string(), cfg)
        })
        .collect();
    run_grid(configs, seeds, datasets, threads)
}

/// `(gamma_sup, gamma_rel)` cells swept by default.
pub const DEFAULT_GAMMA_GRID: [(f64, f64); 8] = [
    (3.0, 0.0),
    (3.0, 0.5),
    (3.0, 1.0),
    (3.0, 2.0),
    (3.0, 3.0),
    (1.0, 1.0),
    (2.0, 1.0),
    (4.0, 1.0),
];

pub fn gamma_label(gamma_sup: f64, gamma_rel: f64) -> String {
    format!("gamma_sup={gamma_sup}/gamma_rel={gamma_rel}")
}

/// One row per grid cell; every cell runs on the same seeds.
pub fn gamma_sweep(
    base: &TrainConfig,
    grid: &[(f64, f64)],
    seeds: &[u64],
    datasets: &(dyn Fn(u64) -> Result<DatasetPair> + Sync),
    threads: usize,
) -> Result<SuiteOutput> {
    if grid.is_empty() {
        return Err(invalid_arg("gamma grid is empty"));
    }
    let configs = grid
        .iter()
        .map(|&(gs, gr)| {
            let cfg = TrainConfig {
                gamma_sup: gs,
                gamma_rel: gr,
                ..base.clone()
            };
            (gamma_label(gs, gr), cfg)
        })
        .collect();
    run_grid(configs, seeds, datasets, threads)
}

pub mod svg {
    //! Minimal static SVG charts.

    use std::fmt::Write as _;

    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

    pub struct Series<'a> {
        pub name: &'a str,
        pub points: &'a [(f64, f64)],
    }

    fn escape(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }

    fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
        let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y1 = y0 + 1.0;
        }
        (x0, x1, y0.min(0.0), y1)
    }

    fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str, b: (f64, f64, f64, f64)) {
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
        let _ = writeln!(
            out,
            r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#,
            H - M,
            W - M,
            H - M,
            H - M
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
        let (x0, x1, y0, y1) = b;
        let _ = writeln!(out, r#"<text x="{M}" y="{}" font-size="10">{x0:.3}</text>"#, H - M + 14.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{x1:.3}</text>"#, W - M, H - M + 14.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.3}</text>"#, M - 4.0, H - M);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y1:.3}</text>"#, M - 4.0, M + 4.0);
    }

    fn project(b: (f64, f64, f64, f64), x: f64, y: f64) -> (f64, f64) {
        let (x0, x1, y0, y1) = b;
        (M + (x - x0) / (x1 - x0) * (W - 2.0 * M), H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M))
    }

    fn legend(out: &mut String, series: &[Series]) {
        for (i, s) in series.iter().enumerate() {
            let y = M + 14.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{y}" font-size="11" fill="{}" text-anchor="end">{}</text>"#,
                W - M - 4.0,
                COLORS[i % COLORS.len()],
                escape(s.name)
            );
        }
    }

    pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
        let b = bounds(series);
        let mut out = String::new();
        frame(&mut out, title, xlabel, ylabel, b);
        for (i, s) in series.iter().enumerate() {
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| {
                    let (px, py) = project(b, x, y);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                COLORS[i % COLORS.len()],
                pts.join(" ")
            );
        }
        legend(&mut out, series);
        out.push_str("</svg>\n");
        out
    }

    pub fn scatter(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
        let b = bounds(series);
        let mut out = String::new();
        frame(&mut out, title, xlabel, ylabel, b);
        for (i, s) in series.iter().enumerate() {
            for &(x, y) in s.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
                let (px, py) = project(b, x, y);
                let _ = writeln!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{}"/>"#, COLORS[i % COLORS.len()]);
            }
        }
        legend(&mut out, series);
        out.push_str("</svg>\n");
        out
    }

    /// Side-by-side bars per bin; `counts[k][b]` is series `k` in bin `b`.
    pub fn histogram(title: &str, edges: &[f64], names: &[&str], counts: &[Vec<usize>]) -> String {
        let bins = edges.len().saturating_sub(1);
        let ymax = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
        let x0 = edges.first().copied().unwrap_or(0.0);
        let x1 = edges.last().copied().unwrap_or(1.0).max(x0 + 1e-12);
        let b = (x0, x1, 0.0, ymax);
        let mut out = String::new();
        frame(&mut out, title, "loss", "count", b);
        let k = counts.len().max(1) as f64;
        for (s, row) in counts.iter().enumerate() {
            for bin in 0..bins.min(row.len()) {
                let (left, top) = project(b, edges[bin], row[bin] as f64);
                let (right, bottom) = project(b, edges[bin + 1], 0.0);
                let w = (right - left) / k;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{top:.2}" width="{w:.2}" height="{:.2}" fill="{}" fill-opacity="0.8"/>"#,
                    left + w * s as f64,
                    bottom - top,
                    COLORS[s % COLORS.len()]
                );
            }
        }
        let series: Vec<Series> = names.iter().map(|n| Series { name: n, points: &[] }).collect();
        legend(&mut out, &series);
        out.push_str("</svg>\n");
        out
    }
}
