use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vitok::autoencoder::ModelConfig;
use vitok::flowgen::{FlowConfig, SampleOptions};
use vitok::imagedata::DatasetSpec;
use vitok::losses::LossWeights;
use vitok::metrics::{BenchOptions, EvalOptions};
use vitok::trainer::TrainConfig;

/// Flow-model architecture plus the knobs that differ from autoencoder
/// training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub steps: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    /// Token grid of generated latents.
    pub sample_grid: (usize, usize),
    pub model: FlowConfig,
    pub sample: SampleOptions,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            peak_lr: 1e-3,
            batch_size: 8,
            sample_grid: (8, 8),
            model: FlowConfig::default(),
            sample: SampleOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub budget: usize,
    pub window: Option<usize>,
    pub center_crop: Option<usize>,
    pub extractor_seed: u64,
    /// Evaluate at most this many images of the dataset.
    pub max_images: usize,
    pub resolutions: Vec<usize>,
    pub swa_radius: usize,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        let b = BenchOptions::default();
        Self {
            budget: e.budget,
            window: e.window,
            center_crop: e.center_crop,
            extractor_seed: e.extractor_seed,
            max_images: 64,
            resolutions: vec![64, 128, 256],
            swa_radius: 8,
            repeats: b.repeats,
            warmup: b.warmup,
        }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            budget: self.budget,
            window: self.window,
            center_crop: self.center_crop,
            extractor_seed: self.extractor_seed,
        }
    }

    pub fn bench_options(&self) -> BenchOptions {
        BenchOptions {
            repeats: self.repeats,
            warmup: self.warmup,
            ..BenchOptions::default()
        }
    }
}

/// Everything a command needs; absent keys take the desk-scale defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub flow: FlowSection,
    pub eval: EvalSection,
    pub data: DatasetSpec,
}

pub const SEED_ENV: &str = "VTK_SEED";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `VTK_SEED` replaces the training seed when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.flow.model.validate()?;
        self.data.validate()?;
        anyhow::ensure!(self.eval.max_images >= 1, "eval.max_images must be at least 1");
        Ok(())
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON form.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let canonical = serde_json::to_string(&value)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nwdith = 3\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn partial_section_keeps_other_defaults() {
        let c = RunConfig::from_toml("[model]\nwidth = 64\n[flow.sample]\nsteps = 10\n").unwrap();
        assert_eq!(c.model.width, 64);
        assert_eq!(c.model.dec_depth, ModelConfig::desk().dec_depth);
        assert_eq!(c.flow.sample.steps, 10);
        assert_eq!(c.flow.sample.cfg_scale, SampleOptions::default().cfg_scale);
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
