//! Experiment config: one self-describing TOML file. Every key has a
//! default, so a minimal config is valid; `--set key=value` flags override
//! individual keys before deserialization.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use mdmt_core::data::GenConfig;
use mdmt_core::loss::{GradNormConfig, Reduction};
use mdmt_core::optim::LrSchedule;
use mdmt_core::trainer::{ArchConfig, DistillSettings, TrainConfig, Variant};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteBlock {
    /// Directory (under out_dir unless absolute) with the dataset files
    /// and suite manifest.
    pub dir: PathBuf,
    pub seed: u64,
    #[serde(flatten)]
    pub gen: GenConfig,
}

impl Default for SuiteBlock {
    fn default() -> Self {
        SuiteBlock {
            dir: PathBuf::from("suite"),
            seed: 7,
            gen: GenConfig::default_suite(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainBlock {
    pub variant: Variant,
    pub epochs: usize,
    pub quota: Vec<usize>,
    pub momentum: f64,
    pub gradnorm: bool,
    pub gradnorm_alpha: f64,
    pub gradnorm_lr: f64,
    pub target_task: usize,
    pub val_fraction: f64,
    pub reduction: Reduction,
    pub lr: LrSchedule,
}

impl Default for TrainBlock {
    fn default() -> Self {
        TrainBlock {
            variant: Variant::MdMtl,
            epochs: 30,
            quota: vec![8, 8, 16],
            momentum: 0.9,
            gradnorm: false,
            gradnorm_alpha: 1.5,
            gradnorm_lr: 0.025,
            target_task: 2,
            val_fraction: 0.1,
            reduction: Reduction::Mean,
            lr: LrSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DaBlock {
    pub margin: f64,
    pub triplets_per_batch: usize,
    pub lambda: f64,
}

impl Default for DaBlock {
    fn default() -> Self {
        DaBlock {
            margin: 0.2,
            triplets_per_batch: 32,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridBlock {
    pub variants: Vec<Variant>,
}

impl Default for GridBlock {
    fn default() -> Self {
        GridBlock {
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub suite: SuiteBlock,
    pub model: ArchConfig,
    pub train: TrainBlock,
    pub da: DaBlock,
    pub distill: DistillSettings,
    pub grid: GridBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs"),
            seeds: vec![1, 2, 3, 4, 5],
            suite: SuiteBlock::default(),
            model: ArchConfig::default(),
            train: TrainBlock::default(),
            da: DaBlock::default(),
            distill: DistillSettings::default(),
            grid: GridBlock::default(),
        }
    }
}

impl ExperimentConfig {
    /// Loads the TOML config, applies `--set key=value` overrides, then
    /// the `MDMT_OUT_DIR` environment override if present.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut doc: toml::Value = text
            .parse()
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        for setting in overrides {
            apply_override(&mut doc, setting)?;
        }
        let mut cfg: ExperimentConfig = doc
            .try_into()
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        if let Ok(dir) = std::env::var("MDMT_OUT_DIR") {
            if !dir.is_empty() {
                cfg.out_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    pub fn suite_dir(&self) -> PathBuf {
        if self.suite.dir.is_absolute() {
            self.suite.dir.clone()
        } else {
            self.out_dir.join(&self.suite.dir)
        }
    }

    /// Assembles the core TrainConfig for one (variant, seed) cell.
    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            epochs: self.train.epochs,
            task_quota: self.train.quota.clone(),
            momentum: self.train.momentum,
            lr: self.train.lr,
            gradnorm: self.train.gradnorm.then_some(GradNormConfig {
                alpha: self.train.gradnorm_alpha,
                lr: self.train.gradnorm_lr,
            }),
            da: mdmt_core::domain_adapt::DaConfig {
                enabled: variant.uses_da(),
                margin: self.da.margin,
                triplets_per_batch: self.da.triplets_per_batch,
                lambda: self.da.lambda,
            },
            distill: self.distill.clone(),
            arch: self.model.clone(),
            target_task: self.train.target_task,
            seed,
            val_fraction: self.train.val_fraction,
            reduction: self.train.reduction,
        }
    }
}

/// Applies one `key.path=value` override into the TOML tree. The value is
/// parsed as TOML (numbers, booleans, arrays, quoted strings); bare words
/// fall back to strings.
fn apply_override(doc: &mut toml::Value, setting: &str) -> Result<(), CliError> {
    let (key, raw) = setting
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {setting:?}")))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(table) => table["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            CliError::usage(format!("--set {key}: {part} is not a table"))
        })?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("non-empty key path");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.quota, vec![8, 8, 16]);
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut doc: toml::Value = "".parse::<toml::Table>().unwrap().into();
        apply_override(&mut doc, "train.epochs=7").unwrap();
        apply_override(&mut doc, "suite.label_noise=0.5").unwrap();
        apply_override(&mut doc, "train.quota=[4,4,8]").unwrap();
        let cfg: ExperimentConfig = doc.try_into().unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.suite.gen.label_noise, 0.5);
        assert_eq!(cfg.train.quota, vec![4, 4, 8]);
    }

    #[test]
    fn bad_override_is_usage_error() {
        let mut doc: toml::Value = "".parse::<toml::Table>().unwrap().into();
        assert!(apply_override(&mut doc, "no-equals-sign").is_err());
    }
}
