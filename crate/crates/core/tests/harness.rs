use std::fs;

use taillab::cass::{select, SelectionMode};
use taillab::datagen::{BenchmarkSpec, LabeledDataset};
use taillab::gmm::GmmConfig;
use taillab::harness::{
    evaluate, export_loss_histograms, export_per_class_accuracy, gamma_label, gamma_sweep, run_ablation_suite,
    DatasetPair, Ensemble, DEFAULT_GAMMA_GRID,
};
use taillab::net::init_model;
use taillab::trainer::{run_experiment, TrainConfig, Variant};
use taillab::{cass, Result};

fn spec(seed: u64) -> BenchmarkSpec {
    BenchmarkSpec {
        num_classes: 4,
        dim: 6,
        base_count: 100,
        imbalance_ratio: 10.0,
        test_per_class: 30,
        seed,
        ..BenchmarkSpec::default()
    }
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs_total: 8,
        warmup_epochs: 2,
        bias_epochs: Some(5),
        hidden_layers: vec![16],
        seed,
        ..TrainConfig::default()
    }
}

fn data(seed: u64) -> Result<DatasetPair> {
    spec(seed).build()
}

#[test]
fn loss_exports_round_trip_exactly() {
    let (train, _) = data(0).unwrap();
    let model = init_model(&[6, 16, 4], 0).unwrap();
    let losses = cass::sample_losses(&model, &train).unwrap();
    let partition = select(&model, &train, &GmmConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let hists = export_loss_histograms(&losses, &train, &partition, 10, dir.path()).unwrap();
    let truly_clean = train.clean_flags().unwrap();
    let selected = partition.selected_flags(train.len());

    for c in 0..4 {
        let text = fs::read_to_string(dir.path().join(format!("losses_class_{c}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("loss,observed_class,is_truly_clean,selected_clean"));
        let idx: Vec<usize> = (0..train.len()).filter(|&i| train.observed_labels[i] == c).collect();
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), idx.len());
        for (row, &i) in rows.iter().zip(&idx) {
            let f: Vec<&str> = row.split(',').collect();
            assert_eq!(f[0].parse::<f64>().unwrap().to_bits(), losses[i].to_bits());
            assert_eq!(f[1], c.to_string());
            assert_eq!(f[2], if truly_clean[i] { "1" } else { "0" });
            assert_eq!(f[3], if selected[i] { "1" } else { "0" });
        }
        assert_eq!(hists[c].total(), idx.len());
        let noisy = idx.iter().filter(|&&i| !truly_clean[i]).count();
        assert_eq!(hists[c].noisy.iter().sum::<usize>(), noisy);
    }

    let again = tempfile::tempdir().unwrap();
    export_loss_histograms(&losses, &train, &partition, 10, again.path()).unwrap();
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(dir.path().join(&name)).unwrap(),
            fs::read(again.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn loss_exports_need_ground_truth() {
    let (train, _) = data(1).unwrap();
    let hidden = LabeledDataset::new(train.features.clone(), train.observed_labels.clone(), None, 4).unwrap();
    let model = init_model(&[6, 4], 1).unwrap();
    let losses = cass::sample_losses(&model, &hidden).unwrap();
    let partition = cass::select_with(&model, &hidden, SelectionMode::ClassAware, &GmmConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(export_loss_histograms(&losses, &hidden, &partition, 10, dir.path()).is_err());
}

#[test]
fn per_class_export_has_one_row_per_class() {
    let (train, test) = data(2).unwrap();
    let out = run_experiment(&quick(2), &train, &test).unwrap();
    let report = out.record.final_eval.clone().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("per_class.csv");
    export_per_class_accuracy(&report, &train.observed_counts, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let counts: Vec<usize> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(report.support(), vec![30; 4]);

    let single = evaluate(&Ensemble(std::slice::from_ref(&out.model)), &test).unwrap();
    assert_eq!(single, report);
}

#[test]
fn balanced_and_overall_accuracy_agree_on_balanced_tests() {
    let (train, test) = data(3).unwrap();
    let model = run_experiment(&quick(3), &train, &test).unwrap().model;
    let r = evaluate(&model, &test).unwrap();
    assert!((r.overall_accuracy - r.balanced_accuracy).abs() < 1e-12);
    let total: usize = r.confusion.iter().flatten().sum();
    assert_eq!(total, test.len());
}

#[test]
fn a_one_run_suite_reports_that_run() {
    let out = run_ablation_suite(&quick(0), &[Variant::Ssbl], &[4], &data, 1).unwrap();
    let (train, test) = data(4).unwrap();
    let direct = run_experiment(&quick(4), &train, &test).unwrap().record;
    let row = out.table.row("ssbl").unwrap();
    assert!(row.is_complete());
    assert_eq!(row.last_accuracy.unwrap().mean, direct.last_accuracy.unwrap());
    assert_eq!(row.best_accuracy.unwrap().median, direct.best_accuracy.unwrap());
    assert_eq!(out.records[0][0].as_ref().unwrap().to_json().unwrap(), direct.to_json().unwrap());
}

#[test]
fn repeated_seeds_have_no_spread_and_threads_do_not_matter() {
    let serial = run_ablation_suite(&quick(0), &[Variant::Ssbl, Variant::Erm], &[5, 5], &data, 1).unwrap();
    for row in &serial.table.rows {
        assert_eq!(row.last_accuracy.unwrap().std, 0.0);
        assert_eq!(row.runs.len(), 2);
    }
    let parallel = run_ablation_suite(&quick(0), &[Variant::Ssbl, Variant::Erm], &[5, 5], &data, 4).unwrap();
    assert_eq!(serial.table.to_json().unwrap(), parallel.table.to_json().unwrap());
    assert_eq!(serial.table.to_csv(), parallel.table.to_csv());
}

#[test]
fn failed_runs_are_kept_in_the_table() {
    let broken = TrainConfig { bias_epochs: Some(1), ..quick(0) };
    let out = run_ablation_suite(&broken, &[Variant::Ssbl], &[0, 1], &data, 1).unwrap();
    let row = &out.table.rows[0];
    assert_eq!(row.failures.len(), 2);
    assert!(row.runs.is_empty() && row.last_accuracy.is_none());
    assert!(out.records[0].iter().all(Option::is_none));
}

#[test]
fn a_one_cell_sweep_is_a_plain_run() {
    let out = gamma_sweep(&quick(0), &[(2.0, 0.5)], &[6], &data, 1).unwrap();
    let (train, test) = data(6).unwrap();
    let cfg = TrainConfig { gamma_sup: 2.0, gamma_rel: 0.5, ..quick(6) };
    let direct = run_experiment(&cfg, &train, &test).unwrap().record;
    assert_eq!(out.table.rows[0].label, gamma_label(2.0, 0.5));
    assert_eq!(out.records[0][0].as_ref().unwrap().to_json().unwrap(), direct.to_json().unwrap());
    assert!(gamma_sweep(&quick(0), &[], &[0], &data, 1).is_err());
}

#[test]
fn default_grid_contains_the_default_exponents() {
    let d = TrainConfig::default();
    assert!(DEFAULT_GAMMA_GRID.contains(&(d.gamma_sup, d.gamma_rel)));
    let mut labels: Vec<String> = DEFAULT_GAMMA_GRID.iter().map(|&(s, r)| gamma_label(s, r)).collect();
    labels.sort();
    labels.dedup();
    assert_eq!(labels.len(), DEFAULT_GAMMA_GRID.len());
}
