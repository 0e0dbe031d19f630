//! Layout of a run directory: field network, fitted latents, denoiser
//! (with schedule and latent statistics) and per-stage config snapshots.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, DiffusionModel, ScheduleConfig};
use crate::error::{Error, Result};
use crate::field_model::{SirenConfig, SirenWeights};
use crate::guidance::Models;
use crate::latent_fit::LatentStore;

pub const SIREN_STEM: &str = "siren";
pub const LATENTS_STEM: &str = "latents";
pub const DENOISER_STEM: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDirectory {
    pub path: PathBuf,
}

/// Metadata describing a complete run, as reported to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub siren: SirenConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub latent_dim: usize,
    pub stats_id: u64,
    pub stats_mean: Vec<f64>,
    pub stats_std: Vec<f64>,
}

impl RunDirectory {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let dir = Self::new(path);
        fs::create_dir_all(&dir.path)?;
        Ok(dir)
    }

    fn has(&self, stem: &str) -> bool {
        self.path.join(format!("{stem}.json")).is_file() && self.path.join(format!("{stem}.bin")).is_file()
    }

    pub fn has_siren(&self) -> bool {
        self.has(SIREN_STEM)
    }

    pub fn has_latents(&self) -> bool {
        self.has(LATENTS_STEM)
    }

    pub fn has_denoiser(&self) -> bool {
        self.has(DENOISER_STEM)
    }

    /// Names of the components still missing for sampling.
    pub fn missing(&self) -> Vec<&'static str> {
        let mut m = Vec::new();
        if !self.has_siren() {
            m.push("field network");
        }
        if !self.has_denoiser() {
            m.push("denoiser");
        }
        m
    }

    fn require(&self, ok: bool, what: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Incomplete(format!("{} has no {what}", self.path.display())))
        }
    }

    pub fn save_siren(&self, w: &SirenWeights) -> Result<()> {
        w.save(&self.path, SIREN_STEM)
    }

    pub fn load_siren(&self) -> Result<SirenWeights> {
        self.require(self.has_siren(), "field network")?;
        SirenWeights::load(&self.path, SIREN_STEM)
    }

    pub fn save_latents(&self, store: &LatentStore) -> Result<()> {
        store.save(&self.path, LATENTS_STEM)
    }

    pub fn load_latents(&self) -> Result<LatentStore> {
        self.require(self.has_latents(), "fitted latents")?;
        LatentStore::load(&self.path, LATENTS_STEM)
    }

    pub fn save_denoiser(&self, m: &DiffusionModel) -> Result<()> {
        m.save(&self.path, DENOISER_STEM)
    }

    pub fn load_denoiser(&self) -> Result<DiffusionModel> {
        self.require(self.has_denoiser(), "denoiser")?;
        DiffusionModel::load(&self.path, DENOISER_STEM)
    }

    pub fn load_models(&self) -> Result<Models> {
        let missing = self.missing();
        if !missing.is_empty() {
            return Err(Error::Incomplete(format!(
                "{} is missing: {}",
                self.path.display(),
                missing.join(", ")
            )));
        }
        Models::new(self.load_siren()?, self.load_denoiser()?)
    }

    pub fn snapshot_path(&self, stage: &str) -> PathBuf {
        self.path.join(format!("config.{stage}.json"))
    }

    pub fn write_snapshot<T: Serialize>(&self, stage: &str, value: &T) -> Result<()> {
        fs::create_dir_all(&self.path)?;
        fs::write(self.snapshot_path(stage), serde_json::to_vec_pretty(value)?)?;
        Ok(())
    }

    pub fn exists(path: &Path) -> bool {
        path.is_dir()
    }
}

pub fn model_info(models: &Models) -> ModelInfo {
    let d = &models.diffusion;
    ModelInfo {
        siren: models.siren.config,
        denoiser: d.weights.config,
        schedule: d.schedule.config,
        latent_dim: d.weights.latent_dim(),
        stats_id: d.stats.id(),
        stats_mean: d.stats.mean.clone(),
        stats_std: d.stats.std.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserWeights, NoiseSchedule};
    use crate::latent_fit::LatentStats;
    use crate::rng::stream_rng;

    #[test]
    fn incomplete_then_complete() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunDirectory::create(tmp.path().join("run")).unwrap();
        assert!(matches!(run.load_models(), Err(Error::Incomplete(_))));
        let scfg = SirenConfig {
            hidden_width: 8,
            hidden_layers: 1,
            latent_dim: 3,
            omega0: 30.0,
        };
        let mut rng = stream_rng(0, 0);
        run.save_siren(&SirenWeights::init(scfg, &mut rng).unwrap()).unwrap();
        assert_eq!(run.missing(), vec!["denoiser"]);
        let dcfg = DenoiserConfig {
            latent_dim: 3,
            width: 8,
            blocks: 1,
            time_dim: 4,
            dropout: 0.0,
        };
        let m = DiffusionModel::new(
            DenoiserWeights::init(dcfg, &mut rng).unwrap(),
            NoiseSchedule::new(ScheduleConfig::default()).unwrap(),
            LatentStats {
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
            },
        )
        .unwrap();
        run.save_denoiser(&m).unwrap();
        let models = run.load_models().unwrap();
        let info = model_info(&models);
        assert_eq!(info.latent_dim, 3);
        assert_eq!(info.siren, scfg);
    }
}
