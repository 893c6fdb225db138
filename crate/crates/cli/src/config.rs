//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taillab::datagen::BenchmarkSpec;
use taillab::ssl::SslConfig;
use taillab::trainer::{TrainConfig, Variant};

use crate::CliError;

// Flattening disables unknown-key checks; `ExperimentConfig::parse` redoes them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// CSV written by `gen-data`; required by `train`, `ablate` and `sweep`.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    #[serde(flatten)]
    pub generate: BenchmarkSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_layers: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_layers: TrainConfig::default().hidden_layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    pub out_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// `[gamma_sup, gamma_rel]` cells; the default grid when absent.
    pub gamma_grid: Option<Vec<[f64; 2]>>,
    pub threads: usize,
    pub histogram_bins: usize,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            out_dir: None,
            seeds: vec![0, 1, 2, 3, 4],
            variants: Variant::ALL.to_vec(),
            gamma_grid: None,
            threads: 1,
            histogram_bins: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub trainer: TrainConfig,
    pub ssl: SslConfig,
    pub harness: HarnessSection,
}

impl ExperimentConfig {
    /// Parses a config file; relative dataset paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset.train_path, &mut cfg.dataset.test_path, &mut cfg.harness.out_dir] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if let Some(toml::Value::Table(t)) = raw.get("trainer") {
            for (key, section) in [("hidden_layers", "model"), ("ssl", "ssl")] {
                if t.contains_key(key) {
                    return Err(CliError::Validation(format!("trainer.{key}: set this under [{section}]")));
                }
            }
        }
        if let Some(toml::Value::Table(t)) = raw.get("dataset") {
            let mut generate = t.clone();
            generate.remove("train_path");
            generate.remove("test_path");
            toml::Value::Table(generate)
                .try_into::<BenchmarkSpec>()
                .map_err(|e| CliError::Validation(format!("dataset: {e}")))?;
        }
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        Ok(cfg)
    }

    /// The trainer settings with the model and ssl sections folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden_layers: self.model.hidden_layers.clone(),
            ssl: self.ssl,
            ..self.trainer.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config()
            .validate()
            .map_err(|e| CliError::Validation(format!("trainer: {e}")))?;
        let d = &self.dataset.generate;
        if d.num_classes < 2 || d.dim == 0 || d.base_count == 0 {
            return Err(CliError::Validation(
                "dataset: num_classes >= 2, dim >= 1 and base_count >= 1 required".into(),
            ));
        }
        if self.harness.seeds.is_empty() {
            return Err(CliError::Validation("harness.seeds: at least one seed required".into()));
        }
        if self.harness.variants.is_empty() {
            return Err(CliError::Validation("harness.variants: at least one variant required".into()));
        }
        if self.harness.threads == 0 {
            return Err(CliError::Validation("harness.threads: must be >= 1".into()));
        }
        if self.harness.histogram_bins == 0 {
            return Err(CliError::Validation("harness.histogram_bins: must be >= 1".into()));
        }
        if matches!(&self.harness.gamma_grid, Some(g) if g.is_empty()) {
            return Err(CliError::Validation("harness.gamma_grid: must not be empty".into()));
        }
        Ok(())
    }

    pub fn require_data_paths(&self) -> Result<(PathBuf, PathBuf), CliError> {
        let train = self
            .dataset
            .train_path
            .clone()
            .ok_or_else(|| CliError::Validation("dataset.train_path: required for this command".into()))?;
        let test = self
            .dataset
            .test_path
            .clone()
            .ok_or_else(|| CliError::Validation("dataset.test_path: required for this command".into()))?;
        Ok((train, test))
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train_config().hidden_layers, vec![64, 64]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("[trainer]\nbatchsize = 3\n").unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
        assert!(ExperimentConfig::parse("[bogus]\n").is_err());
        let err = ExperimentConfig::parse("[dataset]\nnum_clases = 3\n").unwrap_err();
        assert!(err.to_string().contains("num_clases"), "{err}");
    }

    #[test]
    fn misplaced_keys_point_to_their_section() {
        let err = ExperimentConfig::parse("[trainer]\nhidden_layers = [3]\n").unwrap_err();
        assert!(err.to_string().contains("trainer.hidden_layers"), "{err}");
    }

    #[test]
    fn sections_round_trip() {
        let text = r#"
[dataset]
num_classes = 4
noise = { kind = "asymmetric", pairs = [[0, 1]], flip_rate = 0.4, step_ratio = 10.0 }

[trainer]
epochs_total = 8
variant = "no_rebalance"

[ssl]
lambda_u = 0.0
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.dataset.generate.num_classes, 4);
        assert_eq!(cfg.trainer.variant, Variant::NoRebalance);
        assert_eq!(cfg.train_config().ssl.lambda_u, 0.0);
        let again: ExperimentConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn digest_is_stable() {
        let a = ExperimentConfig::default();
        assert_eq!(a.digest(), a.clone().digest());
        let mut b = a.clone();
        b.trainer.seed = 9;
        assert_ne!(a.digest(), b.digest());
    }
}
