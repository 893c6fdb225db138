use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn taillab(args: &[&str]) -> Output {
    taillab_env(args, None)
}

fn taillab_env(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_taillab"));
    cmd.args(args).env_remove("TAILLAB_OUT_DIR");
    if let Some(p) = out_env {
        cmd.env("TAILLAB_OUT_DIR", p);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[dataset]
num_classes = 3
dim = 4
base_count = 60
imbalance_ratio = 6.0
test_per_class = 20
train_path = "data/train.csv"
test_path = "data/test.csv"

[model]
hidden_layers = [8]

[trainer]
epochs_total = 6
warmup_epochs = 2
bias_epochs = 4

[harness]
seeds = [0, 1]
variants = ["ssbl", "erm"]
gamma_grid = [[3.0, 1.0], [1.0, 1.0]]
histogram_bins = 5
"#;

/// Writes the small config into a fresh directory and generates its data.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    let o = taillab(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dir, cfg)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_without_noise_or_imbalance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("flat.toml");
    fs::write(
        &cfg,
        "[dataset]\nimbalance_ratio = 1.0\nbase_count = 50\nnoise = { kind = \"symmetric\", rate = 0.0 }\n",
    )
    .unwrap();
    let o = taillab(&["gen-data", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("empirical noise rate: 0.0000"), "{s}");
    assert!(s.contains("counts=50,50,50,50,50,50,50,50,50,50"), "{s}");
}

#[test]
fn gen_data_defaults_follow_the_long_tail() {
    let dir = tempfile::tempdir().unwrap();
    let o = taillab(&["gen-data", "--out", path(dir.path())]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("true class counts: [500, "), "{s}");
    assert!(s.contains(", 5]"), "{s}");
    assert!(s.starts_with("true class counts") && s.trim_end().lines().last().unwrap().starts_with("status=ok"));
}

#[test]
fn gen_data_is_deterministic_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert!(taillab(&["gen-data", "--seed", seed, "--out", path(&out)]).status.success());
        fs::read(out.join("train.csv")).unwrap()
    };
    assert_eq!(run("a", "3"), run("b", "3"));
    assert_ne!(run("a", "3"), run("c", "4"));
    let manifest = fs::read_to_string(dir.path().join("c/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 4"), "{manifest}");
}

#[test]
fn train_requires_a_training_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bare.toml");
    fs::write(&cfg, "[trainer]\nepochs_total = 4\nwarmup_epochs = 1\n").unwrap();
    let o = taillab(&["train", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset.train_path"), "{}", stderr(&o));
    assert!(stdout(&o).contains("status=error kind=validation"));

    fs::write(&cfg, "[dataset]\ntrain_path = \"missing.csv\"\ntest_path = \"missing.csv\"\n").unwrap();
    let o = taillab(&["train", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn bad_configs_and_flags_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "[trainer]\nepoch_total = 4\n").unwrap();
    assert_eq!(taillab(&["gen-data", "--config", path(&cfg), "--out", path(dir.path())]).status.code(), Some(1));
    fs::write(&cfg, "[dataset]\nnum_clases = 4\n").unwrap();
    assert_eq!(taillab(&["gen-data", "--config", path(&cfg), "--out", path(dir.path())]).status.code(), Some(1));
    assert_eq!(taillab(&["gen-data", "--variant", "nope", "--out", path(dir.path())]).status.code(), Some(1));
    assert_eq!(taillab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(taillab(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_writes_artifacts_and_a_stable_manifest() {
    let (dir, cfg) = workspace();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", path(&cfg), "--out", path(&out)];
        args.extend_from_slice(extra);
        let o = taillab(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("status=ok command=train"));
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    for f in ["record.json", "epochs.csv", "model.txt", "per_class_accuracy.csv", "manifest.json", "losses/losses_class_0.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(a.join("record.json")).unwrap(), fs::read(b.join("record.json")).unwrap());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let per_class = fs::read_to_string(a.join("per_class_accuracy.csv")).unwrap();
    assert_eq!(per_class.lines().count(), 1 + 3);

    let c = run("c", &["--seed", "9"]);
    let manifest = fs::read_to_string(c.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"));
    let record = fs::read_to_string(c.join("record.json")).unwrap();
    assert!(record.contains("\"seed\": 9"));
    let d = run("d", &["--variant", "erm"]);
    assert!(fs::read_to_string(d.join("record.json")).unwrap().contains("\"variant\": \"erm\""));
}

#[test]
fn output_directory_precedence() {
    let (dir, cfg) = workspace();
    let env_dir = dir.path().join("from_env");
    let flag_dir = dir.path().join("from_flag");
    let o = taillab_env(&["train", "--config", path(&cfg)], Some(&env_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_dir.join("record.json").exists());
    let o = taillab_env(&["train", "--config", path(&cfg), "--out", path(&flag_dir)], Some(&env_dir));
    assert!(o.status.success());
    assert!(flag_dir.join("record.json").exists());

    let with_out = dir.path().join("with_out.toml");
    fs::write(&with_out, format!("{SMALL}out_dir = \"cfg_out\"\n")).unwrap();
    let o = taillab_env(&["train", "--config", path(&with_out)], Some(&env_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("cfg_out/record.json").exists());
}

#[test]
fn plots_are_well_formed_and_reproducible() {
    let (dir, cfg) = workspace();
    let run = dir.path().join("run");
    assert!(taillab(&["train", "--config", path(&cfg), "--out", path(&run)]).status.success());
    let o = taillab(&["plot", path(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plots = run.join("plots");
    let mut first = Vec::new();
    for entry in fs::read_dir(&plots).unwrap() {
        let p = entry.unwrap().path();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"), "{p:?}");
        first.push((p, text));
    }
    assert!(first.len() >= 3);
    assert!(taillab(&["plot", path(&run), "--kind", "all"]).status.success());
    for (p, text) in first {
        assert_eq!(fs::read_to_string(&p).unwrap(), text);
    }

    let o = taillab(&["plot", path(&run), "--kind", "pie"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for k in ["accuracy", "per-class", "losses", "all"] {
        assert!(err.contains(k), "{err}");
    }
    assert_eq!(taillab(&["plot", path(&dir.path().join("nowhere"))]).status.code(), Some(1));
}

#[test]
fn ablate_and_sweep_write_tables() {
    let (dir, cfg) = workspace();
    let out = dir.path().join("ablate");
    let o = taillab(&["ablate", "--config", path(&cfg), "--out", path(&out), "--threads", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("ssbl,")) && csv.lines().any(|l| l.starts_with("erm,")), "{csv}");

    let out = dir.path().join("sweep");
    let o = taillab(&["sweep", "--config", path(&cfg), "--out", path(&out), "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rows=2"));
    let json = fs::read_to_string(out.join("sweep.json")).unwrap();
    assert!(json.contains("gamma_sup=1/gamma_rel=1"), "{json}");
}

#[test]
fn selftest_passes_and_catches_a_flipped_gradient() {
    let o = taillab(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("failed=0"));
    let o = taillab(&["selftest", "--flip-balanced-gradient"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"), "{}", stdout(&o));
}
