//! One experiment = one TOML file. Unknown keys are hard errors so a config
//! always means what it says; the master seed at the top deterministically
//! derives every other seed in the pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeadaError};
use crate::nets::{ArchConfig, Method};
use crate::phantom::PhantomConfig;
use crate::seeds;
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// TOML integers are i64; derived seeds stored in config files stay in range.
fn toml_seed(x: u64) -> u64 {
    x & (i64::MAX as u64)
}

pub const ALL_METHODS: [&str; 6] = ["CAE", "NOISE", "COMBAT", "ADA", "MDADA", "SEADA"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_stage1: f32,
    pub lr_stage2: f32,
    pub lr_stage3: f32,
    /// Predictor updates per batch in stage 2.
    pub stage2_reps: usize,
    /// Average the weights over the last N epochs (0 disables).
    pub avg_tail_epochs: usize,
    pub w_recon: f32,
    pub w_style: f32,
    pub w_conf: f32,
    /// Train fraction of the patient-level split within training domains.
    pub split_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Sigma for the additive-noise baseline.
    pub noise_sigma: f32,
    /// Empirical-Bayes shrinkage for the harmonization baseline.
    pub combat_eb: bool,
    /// Disease one-hot covariates during harmonization fitting.
    pub combat_covariates: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub methods: Vec<String>,
    pub phantom: PhantomConfig,
    pub arch: ArchConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn desk_default(master_seed: u64, out_dir: PathBuf) -> Self {
        let mut phantom = PhantomConfig::default_desk(toml_seed(seeds::derive(master_seed, "phantom")));
        let num_train = phantom
            .domains
            .iter()
            .filter(|d| d.role == crate::data::DomainRole::Train)
            .count();
        let arch = ArchConfig::desk_default(num_train);
        phantom.shape = arch.shape;
        let t = TrainConfig::desk_default(Method::SEADA, 0);
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            master_seed,
            out_dir,
            methods: ALL_METHODS.iter().map(|m| m.to_string()).collect(),
            phantom,
            arch,
            train: TrainSection {
                epochs: t.epochs,
                batch_size: t.batch_size,
                lr_stage1: t.lr_stage1,
                lr_stage2: t.lr_stage2,
                lr_stage3: t.lr_stage3,
                stage2_reps: t.stage2_reps,
                avg_tail_epochs: t.avg_tail_epochs,
                w_recon: t.w_recon,
                w_style: t.w_style,
                w_conf: t.w_conf,
                split_ratio: 0.8,
            },
            eval: EvalSection { noise_sigma: 0.1, combat_eb: true, combat_covariates: true },
        }
    }

    /// Re-derive all dependent seeds from the master seed. Call after any
    /// seed override so the whole pipeline follows.
    pub fn reseed(&mut self, master_seed: u64) {
        self.master_seed = master_seed;
        self.phantom.master_seed = toml_seed(seeds::derive(master_seed, "phantom"));
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(SeadaError::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.methods.is_empty() {
            return Err(SeadaError::Config("no methods listed".into()));
        }
        for m in &self.methods {
            if !ALL_METHODS.contains(&m.as_str()) {
                return Err(SeadaError::Config(format!(
                    "unknown method '{m}' (choose from {})",
                    ALL_METHODS.join(", ")
                )));
            }
        }
        if self.phantom.shape != self.arch.shape {
            return Err(SeadaError::Config(format!(
                "phantom shape {:?} does not match network shape {:?}",
                self.phantom.shape, self.arch.shape
            )));
        }
        if !(0.0 < self.train.split_ratio && self.train.split_ratio < 1.0) {
            return Err(SeadaError::Config("split_ratio must be in (0, 1)".into()));
        }
        if self.eval.noise_sigma < 0.0 {
            return Err(SeadaError::Config("noise_sigma must be >= 0".into()));
        }
        self.phantom.validate()?;
        self.arch.validate()?;
        self.train_config(Method::SEADA).validate()?;
        Ok(())
    }

    pub fn train_config(&self, method: Method) -> TrainConfig {
        TrainConfig {
            method,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr_stage1: self.train.lr_stage1,
            lr_stage2: self.train.lr_stage2,
            lr_stage3: self.train.lr_stage3,
            stage2_reps: self.train.stage2_reps,
            avg_tail_epochs: self.train.avg_tail_epochs,
            w_recon: self.train.w_recon,
            w_style: self.train.w_style,
            w_conf: self.train.w_conf,
            seed: seeds::derive(self.master_seed, &format!("train/{}", method.as_str())),
            cn_only_stage3: true,
        }
    }

    pub fn split_seed(&self) -> u64 {
        seeds::derive(self.master_seed, "patient-split")
    }

    pub fn eval_seed(&self, tag: &str) -> u64 {
        seeds::derive(self.master_seed, &format!("eval/{tag}"))
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| SeadaError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let text = toml::to_string_pretty(cfg).map_err(|e| SeadaError::Serde(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::desk_default(7, PathBuf::from("runs/x"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        save_config(&path, &cfg).unwrap();
        let loaded = load_config(&path).unwrap();
        assert_eq!(loaded.master_seed, 7);
        assert_eq!(loaded.phantom.domains.len(), cfg.phantom.domains.len());
        assert_eq!(loaded.train, cfg.train);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = ExperimentConfig::desk_default(7, PathBuf::from("runs/x"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        save_config(&path, &cfg).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("\nmystery_key = 3\n");
        fs::write(&path, &text).unwrap();
        assert!(load_config(&path).is_err());
    }

    #[test]
    fn reseed_rederives_phantom_seed() {
        let mut cfg = ExperimentConfig::desk_default(7, PathBuf::from("runs/x"));
        let old = cfg.phantom.master_seed;
        cfg.reseed(8);
        assert_eq!(cfg.master_seed, 8);
        assert_ne!(cfg.phantom.master_seed, old);
        cfg.reseed(7);
        assert_eq!(cfg.phantom.master_seed, old);
    }

    #[test]
    fn bad_method_and_mismatched_shape_fail() {
        let mut cfg = ExperimentConfig::desk_default(7, PathBuf::from("runs/x"));
        cfg.methods.push("RESNET".into());
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk_default(7, PathBuf::from("runs/x"));
        cfg.phantom.shape = [16, 16, 16];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn per_method_training_seeds_differ() {
        let cfg = ExperimentConfig::desk_default(7, PathBuf::from("runs/x"));
        assert_ne!(cfg.train_config(Method::CAE).seed, cfg.train_config(Method::SEADA).seed);
    }
}
