use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use taillab::cass::{sample_losses, select_with};
use taillab::datagen::{load_dataset, save_dataset, LabeledDataset};
use taillab::harness::{
    epochs_csv, export_loss_histograms, export_per_class_accuracy, gamma_sweep, run_ablation_suite, svg, SuiteOutput,
    DEFAULT_GAMMA_GRID,
};
use taillab::net::save_model;
use taillab::selftest::{run_selftest, SelftestOptions};
use taillab::trainer::{run_experiment, Variant};

use crate::config::ExperimentConfig;
use crate::{CliError, Common};

pub const OUT_ENV: &str = "TAILLAB_OUT_DIR";
const DEFAULT_OUT: &str = "taillab-out";

fn load_config(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &c.variant {
        cfg.trainer.variant = v.parse::<Variant>().map_err(|e| CliError::Validation(format!("--variant: {e}")))?;
    }
    if let Some(t) = c.threads {
        cfg.harness.threads = t;
    }
    Ok(cfg)
}

/// `--out`, then the config, then `TAILLAB_OUT_DIR`, then `taillab-out`.
fn out_root(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    c.out
        .clone()
        .or_else(|| cfg.harness.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    taillab_version: &'a str,
    artifacts: Vec<String>,
    config: &'a ExperimentConfig,
}

fn write_manifest(out: &Path, command: &str, cfg: &ExperimentConfig, seed: u64, mut artifacts: Vec<String>) -> Result<(), CliError> {
    artifacts.sort();
    let m = Manifest {
        command,
        config_sha256: cfg.digest(),
        seed,
        taillab_version: env!("CARGO_PKG_VERSION"),
        artifacts,
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(out.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn write(out: &Path, name: &str, contents: &str, artifacts: &mut Vec<String>) -> Result<(), CliError> {
    let path = out.join(name);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, contents)?;
    artifacts.push(name.to_string());
    Ok(())
}

fn load_pair(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    let (train_path, test_path) = cfg.require_data_paths()?;
    let read = |p: &Path, field: &str| {
        if !p.exists() {
            return Err(CliError::Validation(format!("{field}: {} does not exist", p.display())));
        }
        load_dataset(p).map_err(|e| CliError::Validation(format!("{field}: {e}")))
    };
    let train = read(&train_path, "dataset.train_path")?;
    let test = read(&test_path, "dataset.test_path")?;
    if train.num_classes != test.num_classes || train.dim() != test.dim() {
        return Err(CliError::Validation("train and test splits have different shapes".into()));
    }
    Ok((train, test))
}

pub fn gen_data(c: &Common) -> Result<String, CliError> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.dataset.generate.seed = s;
    }
    cfg.validate()?;
    let out = out_root(c, &cfg);
    fs::create_dir_all(&out)?;
    let spec = &cfg.dataset.generate;
    let (train, test) = spec.build()?;
    save_dataset(&train, &out.join("train.csv"))?;
    save_dataset(&test, &out.join("test.csv"))?;
    let rate = train.noise_rate()?;
    let counts: Vec<String> = train.observed_counts.iter().map(|n| n.to_string()).collect();
    let true_counts = spec.train_counts()?;
    println!("true class counts: {true_counts:?}");
    println!("observed class counts: [{}]", counts.join(", "));
    println!("empirical noise rate: {rate:.4}");
    write_manifest(&out, "gen-data", &cfg, spec.seed, vec!["train.csv".into(), "test.csv".into()])?;
    Ok(format!(
        "command=gen-data train={} test={} n_train={} noise_rate={rate:.4} counts={}",
        out.join("train.csv").display(),
        out.join("test.csv").display(),
        train.len(),
        true_counts.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
    ))
}

pub fn train(c: &Common) -> Result<String, CliError> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.trainer.seed = s;
    }
    cfg.validate()?;
    let (train, test) = load_pair(&cfg)?;
    let out = out_root(c, &cfg);
    fs::create_dir_all(&out)?;
    let tc = cfg.train_config();
    let run = run_experiment(&tc, &train, &test)?;
    let record = &run.record;
    let mut artifacts = Vec::new();
    write(&out, "record.json", &(record.to_json()? + "\n"), &mut artifacts)?;
    write(&out, "epochs.csv", &epochs_csv(record), &mut artifacts)?;
    save_model(&run.model, &out.join("model.txt"))?;
    artifacts.push("model.txt".into());
    if let Some(report) = &record.final_eval {
        export_per_class_accuracy(report, &train.observed_counts, &out.join("per_class_accuracy.csv"))?;
        artifacts.push("per_class_accuracy.csv".into());
    }
    if train.true_labels.is_some() {
        let losses = sample_losses(&run.model, &train)?;
        let partition = select_with(&run.model, &train, tc.selection, &tc.gmm)?;
        export_loss_histograms(&losses, &train, &partition, cfg.harness.histogram_bins, &out.join("losses"))?;
        artifacts.push("losses/".into());
    }
    write_manifest(&out, "train", &cfg, tc.seed, artifacts)?;
    let f = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.4}"));
    Ok(format!(
        "command=train variant={} seed={} best_balanced_accuracy={} last_balanced_accuracy={} out={}",
        tc.variant,
        tc.seed,
        f(record.best_balanced_accuracy),
        f(record.last_balanced_accuracy),
        out.display()
    ))
}

fn write_suite(out: &Path, stem: &str, suite: &SuiteOutput, artifacts: &mut Vec<String>) -> Result<Vec<String>, CliError> {
    write(out, &format!("{stem}.csv"), &suite.table.to_csv(), artifacts)?;
    write(out, &format!("{stem}.json"), &(suite.table.to_json()? + "\n"), artifacts)?;
    let mut failures = Vec::new();
    for (row, records) in suite.table.rows.iter().zip(&suite.records) {
        for (seed, rec) in suite.table.seeds.iter().zip(records) {
            if let Some(r) = rec {
                let name = format!("records/{}_seed{seed}.json", row.label.replace(['/', '='], "_"));
                write(out, &name, &(r.to_json()? + "\n"), artifacts)?;
            }
        }
        for (seed, msg) in &row.failures {
            failures.push(format!("{} seed {seed}: {msg}", row.label));
        }
    }
    Ok(failures)
}

fn suite_summary(command: &str, suite: &SuiteOutput, out: &Path) -> String {
    let cells: Vec<String> = suite
        .table
        .rows
        .iter()
        .map(|r| {
            let m = r.last_balanced_accuracy.map_or("nan".into(), |s| format!("{:.4}", s.median));
            format!("{}:{m}", r.label)
        })
        .collect();
    format!("command={command} rows={} median_last_balanced={} out={}", suite.table.rows.len(), cells.join(";"), out.display())
}

fn run_suite(c: &Common, command: &str) -> Result<String, CliError> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.harness.seeds = vec![s];
    }
    cfg.validate()?;
    let (train, test) = load_pair(&cfg)?;
    let out = out_root(c, &cfg);
    fs::create_dir_all(&out)?;
    let tc = cfg.train_config();
    let data = |_seed: u64| Ok((train.clone(), test.clone()));
    let threads = cfg.harness.threads;
    let suite = if command == "ablate" {
        run_ablation_suite(&tc, &cfg.harness.variants, &cfg.harness.seeds, &data, threads)?
    } else {
        let grid: Vec<(f64, f64)> = match &cfg.harness.gamma_grid {
            Some(g) => g.iter().map(|c| (c[0], c[1])).collect(),
            None => DEFAULT_GAMMA_GRID.to_vec(),
        };
        gamma_sweep(&tc, &grid, &cfg.harness.seeds, &data, threads)?
    };
    let stem = if command == "ablate" { "ablation" } else { "sweep" };
    let mut artifacts = Vec::new();
    let failures = write_suite(&out, stem, &suite, &mut artifacts)?;
    write_manifest(&out, command, &cfg, tc.seed, artifacts)?;
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!("{} run(s) failed: {}", failures.len(), failures.join("; "))));
    }
    Ok(suite_summary(command, &suite, &out))
}

pub fn ablate(c: &Common) -> Result<String, CliError> {
    run_suite(c, "ablate")
}

pub fn sweep(c: &Common) -> Result<String, CliError> {
    run_suite(c, "sweep")
}

pub const PLOT_KINDS: [&str; 4] = ["accuracy", "per-class", "losses", "all"];

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("missing plot input {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Validation(format!("{} is empty", path.display())))?
        .split(',')
        .map(String::from)
        .collect();
    let rows = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(String::from).collect()).collect();
    Ok((header, rows))
}

fn column(header: &[String], rows: &[Vec<String>], name: &str, path: &Path) -> Result<Vec<f64>, CliError> {
    let k = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Validation(format!("{}: no `{name}` column", path.display())))?;
    Ok(rows
        .iter()
        .map(|r| r.get(k).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
        .collect())
}

fn plot_accuracy(run_dir: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let path = run_dir.join("epochs.csv");
    let (h, rows) = read_csv(&path)?;
    let epoch = column(&h, &rows, "epoch", &path)?;
    let acc = column(&h, &rows, "test_accuracy", &path)?;
    let bal = column(&h, &rows, "test_balanced_accuracy", &path)?;
    let a: Vec<(f64, f64)> = epoch.iter().copied().zip(acc).collect();
    let b: Vec<(f64, f64)> = epoch.iter().copied().zip(bal).collect();
    let chart = svg::line_chart(
        "test accuracy",
        "epoch",
        "accuracy",
        &[svg::Series { name: "overall", points: &a }, svg::Series { name: "balanced", points: &b }],
    );
    let target = out.join("accuracy.svg");
    fs::write(&target, chart)?;
    Ok(vec![target])
}

fn plot_per_class(run_dir: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let path = run_dir.join("per_class_accuracy.csv");
    let (h, rows) = read_csv(&path)?;
    let n = column(&h, &rows, "train_count", &path)?;
    let acc = column(&h, &rows, "test_accuracy", &path)?;
    let pts: Vec<(f64, f64)> = n.into_iter().zip(acc).collect();
    let chart = svg::scatter(
        "per-class accuracy vs training frequency",
        "training samples",
        "test accuracy",
        &[svg::Series { name: "class", points: &pts }],
    );
    let target = out.join("per_class_accuracy.svg");
    fs::write(&target, chart)?;
    Ok(vec![target])
}

fn plot_losses(run_dir: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let dir = run_dir.join("losses");
    let mut written = Vec::new();
    for c in 0.. {
        let path = dir.join(format!("histogram_class_{c}.csv"));
        if !path.exists() {
            break;
        }
        let (h, rows) = read_csv(&path)?;
        let lo = column(&h, &rows, "bin_low", &path)?;
        let hi = column(&h, &rows, "bin_high", &path)?;
        let clean = column(&h, &rows, "clean", &path)?;
        let noisy = column(&h, &rows, "noisy", &path)?;
        let mut edges = lo.clone();
        edges.extend(hi.last());
        let counts = [clean, noisy].map(|v| v.into_iter().map(|x| x as usize).collect::<Vec<_>>());
        let chart = svg::histogram(&format!("loss distribution, class {c}"), &edges, &["clean", "noisy"], &counts);
        let target = out.join(format!("loss_histogram_class_{c}.svg"));
        fs::write(&target, chart)?;
        written.push(target);
    }
    if written.is_empty() {
        return Err(CliError::Validation(format!("missing plot input {}", dir.join("histogram_class_0.csv").display())));
    }
    Ok(written)
}

pub fn plot(run_dir: &Path, kind: &str) -> Result<String, CliError> {
    if !PLOT_KINDS.contains(&kind) {
        return Err(CliError::Validation(format!(
            "unknown plot kind `{kind}`; valid kinds: {}",
            PLOT_KINDS.join(", ")
        )));
    }
    if !run_dir.is_dir() {
        return Err(CliError::Validation(format!("run directory {} does not exist", run_dir.display())));
    }
    let out = run_dir.join("plots");
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    if matches!(kind, "accuracy" | "all") {
        written.extend(plot_accuracy(run_dir, &out)?);
    }
    if matches!(kind, "per-class" | "all") {
        written.extend(plot_per_class(run_dir, &out)?);
    }
    if matches!(kind, "losses" | "all") {
        written.extend(plot_losses(run_dir, &out)?);
    }
    Ok(format!("command=plot kind={kind} files={} out={}", written.len(), out.display()))
}

pub fn selftest(flip_balanced_gradient: bool) -> Result<String, CliError> {
    let report = run_selftest(&SelftestOptions {
        flip_balanced_gradient_sign: flip_balanced_gradient,
    });
    print!("{}", report.table());
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} self-test checks failed", report.checks.len())));
    }
    Ok(format!("command=selftest checks={} failed=0", report.checks.len()))
}
