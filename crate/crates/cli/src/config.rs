//! Run configuration. Values resolve in this order, later wins: built-in
//! defaults, the `--config` JSON file, command-line flags. The artifact
//! root is `--home`, else `paths.home` from the file, else `$SADM_HOME`,
//! else `./sadm-home`.

use std::path::{Path, PathBuf};

use sadm_core::nn::OptimizerKind;
use sadm_core::training::TrainOptions;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const HOME_ENV: &str = "SADM_HOME";
pub const DEFAULT_HOME: &str = "sadm-home";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub data: u64,
    pub ae: u64,
    pub denoiser: u64,
    pub sample: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            ae: 1,
            denoiser: 2,
            sample: 3,
        }
    }
}

/// Artifact locations; relative entries resolve against `home`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub home: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub ae_checkpoint: Option<PathBuf>,
    pub denoiser_checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSteps {
    pub ae: u64,
    pub denoiser: u64,
    pub ae_batch: usize,
    pub denoiser_batch: usize,
    pub ae_lr: f64,
    pub denoiser_lr: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainingSteps {
    fn default() -> Self {
        Self {
            ae: 4000,
            denoiser: 10_000,
            ae_batch: 16,
            denoiser_batch: 32,
            ae_lr: 1e-3,
            denoiser_lr: 5e-4,
            checkpoint_every: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub resolution: usize,
    pub latent_size: usize,
    pub steps: usize,
    pub cfg_scale: f64,
    pub strength_srm: f64,
    pub strength_saet_sgm: f64,
    pub strength_saet_srm: f64,
    pub seeds: Seeds,
    pub paths: Paths,
    pub dataset_size: usize,
    pub training: TrainingSteps,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            latent_size: 16,
            steps: 50,
            cfg_scale: 6.0,
            strength_srm: 0.8,
            strength_saet_sgm: 0.9,
            strength_saet_srm: 0.8,
            seeds: Seeds::default(),
            paths: Paths::default(),
            dataset_size: 8192,
            training: TrainingSteps::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        for (name, s) in [
            ("strength_srm", self.strength_srm),
            ("strength_saet_sgm", self.strength_saet_sgm),
            ("strength_saet_srm", self.strength_saet_srm),
        ] {
            if !(0.0..=1.0).contains(&s) {
                bad.push(format!("{name} = {s} is outside [0, 1]"));
            }
        }
        if self.steps == 0 {
            bad.push("steps must be at least 1".into());
        }
        if !self.cfg_scale.is_finite() {
            bad.push("cfg_scale must be finite".into());
        }
        if self.resolution != 4 * self.latent_size {
            bad.push(format!(
                "resolution {} must be four times latent_size {}",
                self.resolution, self.latent_size
            ));
        }
        if self.resolution != sadm_core::synthdata::IMAGE_SIZE {
            bad.push(format!(
                "resolution {} is not supported; the models run at {}",
                self.resolution,
                sadm_core::synthdata::IMAGE_SIZE
            ));
        }
        let t = &self.training;
        if t.ae_batch == 0 || t.denoiser_batch == 0 || t.checkpoint_every == 0 {
            bad.push("batch sizes and checkpoint cadence must be positive".into());
        }
        for (name, lr) in [("ae_lr", t.ae_lr), ("denoiser_lr", t.denoiser_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                bad.push(format!("{name} = {lr} must be finite and >= 0"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad.join("; ")))
        }
    }

    pub fn home(&self) -> PathBuf {
        self.paths
            .home
            .clone()
            .or_else(|| std::env::var_os(HOME_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_HOME))
    }

    fn under_home(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        match p {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.home().join(p),
            None => self.home().join(default),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.under_home(&self.paths.dataset, "data")
    }

    pub fn ae_checkpoint(&self) -> PathBuf {
        self.under_home(&self.paths.ae_checkpoint, "checkpoints/ae.sadm")
    }

    pub fn denoiser_checkpoint(&self) -> PathBuf {
        self.under_home(&self.paths.denoiser_checkpoint, "checkpoints/denoiser.sadm")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.under_home(&self.paths.output, "out")
    }

    pub fn ae_train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.training.ae,
            batch_size: self.training.ae_batch,
            lr: self.training.ae_lr,
            seed: self.seeds.ae,
            optimizer: OptimizerKind::adam(),
            checkpoint_every: self.training.checkpoint_every,
        }
    }

    pub fn denoiser_train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.training.denoiser,
            batch_size: self.training.denoiser_batch,
            lr: self.training.denoiser_lr,
            seed: self.seeds.denoiser,
            optimizer: OptimizerKind::adam(),
            checkpoint_every: self.training.checkpoint_every,
        }
    }
}

/// Loss log sitting next to a checkpoint.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_json(r#"{"steps": 20, "seeds": {"sample": 9}}"#).unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.seeds.sample, 9);
        assert_eq!(cfg.seeds.ae, Seeds::default().ae);
        assert_eq!(cfg.cfg_scale, 6.0);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"stepz": 20}"#).is_err());
        let cfg = RunConfig {
            strength_srm: 1.5,
            steps: 0,
            ..RunConfig::default()
        };
        let CliError::Config(msg) = cfg.validate().unwrap_err() else {
            panic!("expected a config error")
        };
        assert!(msg.contains("strength_srm") && msg.contains("steps"));
    }

    #[test]
    fn relative_paths_resolve_under_home() {
        let cfg = RunConfig {
            paths: Paths {
                home: Some("/tmp/h".into()),
                dataset: Some("d".into()),
                output: Some("/abs/out".into()),
                ..Paths::default()
            },
            ..RunConfig::default()
        };
        assert_eq!(cfg.dataset_dir(), PathBuf::from("/tmp/h/d"));
        assert_eq!(cfg.output_dir(), PathBuf::from("/abs/out"));
        assert_eq!(cfg.ae_checkpoint(), PathBuf::from("/tmp/h/checkpoints/ae.sadm"));
    }
}
