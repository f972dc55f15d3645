use crate::CliError;
use mfp_models::classifier::ClassifierConfig;
use mfp_models::diffusion::DiffusionConfig;
use mfp_models::sampler::SamplerConfig;
use mfp_models::vae::VaeConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Checkpoint locations; the in-betweening model is keyed by its trained
/// transition length.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoints {
    #[serde(default = "default_vae_map")]
    pub vae: BTreeMap<String, PathBuf>,
    #[serde(default = "default_mdm_path")]
    pub mdm: PathBuf,
    #[serde(default = "default_sampler_path")]
    pub sampler: PathBuf,
    #[serde(default = "default_classifier_path")]
    pub classifier: PathBuf,
}

fn default_vae_map() -> BTreeMap<String, PathBuf> {
    let mut m = BTreeMap::new();
    m.insert("20".to_string(), PathBuf::from("checkpoints/vae_tb20.mfpk"));
    m.insert("40".to_string(), PathBuf::from("checkpoints/vae_tb40.mfpk"));
    m
}

fn default_mdm_path() -> PathBuf {
    PathBuf::from("checkpoints/mdm.mfpk")
}

fn default_sampler_path() -> PathBuf {
    PathBuf::from("checkpoints/sampler.mfpk")
}

fn default_classifier_path() -> PathBuf {
    PathBuf::from("checkpoints/classifier.mfpk")
}

impl Default for Checkpoints {
    fn default() -> Self {
        Checkpoints {
            vae: default_vae_map(),
            mdm: default_mdm_path(),
            sampler: default_sampler_path(),
            classifier: default_classifier_path(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingParams {
    pub vae_epochs: usize,
    pub vae_lr: f64,
    pub vae_batch: usize,
    pub mdm_epochs: usize,
    pub mdm_lr: f64,
    pub mdm_batch: usize,
    pub sampler_epochs: usize,
    pub sampler_lr: f64,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    pub classifier_batch: usize,
}

impl Default for TrainingParams {
    fn default() -> Self {
        TrainingParams {
            vae_epochs: 500,
            vae_lr: 1e-3,
            vae_batch: 32,
            mdm_epochs: 2000,
            mdm_lr: 1e-3,
            mdm_batch: 32,
            sampler_epochs: 30,
            sampler_lr: 1e-2,
            classifier_epochs: 50,
            classifier_lr: 3e-3,
            classifier_batch: 16,
        }
    }
}

/// Everything a run needs: datasets, checkpoint paths, model shapes, and
/// training hyperparameters. Relative paths resolve against the config
/// file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub target_dataset: Option<PathBuf>,
    #[serde(default)]
    pub checkpoints: Checkpoints,
    #[serde(default)]
    pub vae: VaeConfig,
    #[serde(default)]
    pub mdm: DiffusionConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub training: TrainingParams,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    7
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        fix(&mut self.dataset);
        if let Some(t) = &mut self.target_dataset {
            fix(t);
        }
        for p in self.checkpoints.vae.values_mut() {
            fix(p);
        }
        fix(&mut self.checkpoints.mdm);
        fix(&mut self.checkpoints.sampler);
        fix(&mut self.checkpoints.classifier);
    }

    /// Checkpoint path for a transition length; lists the configured
    /// lengths when absent.
    pub fn vae_checkpoint(&self, t_between: usize) -> Result<&PathBuf, CliError> {
        self.checkpoints.vae.get(&t_between.to_string()).ok_or_else(|| {
            CliError::Config(format!(
                "no checkpoint configured for t_between = {t_between}; configured: {:?}",
                self.checkpoints.vae.keys().collect::<Vec<_>>()
            ))
        })
    }
}
