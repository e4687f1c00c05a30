//! Run configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmm::MemoryConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;
use crate::scoring::{dataset_alpha, FusionConfig};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// the rate is multiplied by `lr_drop_factor` for every epoch after this one
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub mining_fraction: f64,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_drop_epoch: 80,
            lr_drop_factor: 0.1,
            batch_size: 8,
            mining_fraction: 0.5,
            synth: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub root: PathBuf,
    /// benchmark family, used to pick the default fusion ratio
    pub dataset: Option<String>,
    pub texture_pool: Option<PathBuf>,
    pub normalization: Normalization,
    /// optional teacher weight file stem
    pub teacher_weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub memory: MemoryConfig,
    pub train: TrainConfig,
    pub score: FusionConfig,
    pub metrics: MetricsConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::mvtec()
    }
}

impl RunConfig {
    /// Full-size recipe for MVTec-style benchmarks.
    pub fn mvtec() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            memory: MemoryConfig::default(),
            train: TrainConfig::default(),
            score: FusionConfig::default(),
            metrics: MetricsConfig::default(),
            data: DataConfig {
                dataset: Some("mvtec".into()),
                ..Default::default()
            },
        }
    }

    /// Small profile for the procedural toy dataset.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                image_size: 64,
                patch_size: 8,
                embed_dim: 64,
                num_heads: 4,
                num_classes: 2,
                ..ModelConfig::default()
            },
            memory: MemoryConfig {
                slots: 64,
                ..MemoryConfig::default()
            },
            train: TrainConfig {
                epochs: 30,
                lr: 1e-3,
                lr_drop_epoch: 24,
                ..TrainConfig::default()
            },
            score: FusionConfig::default(),
            metrics: MetricsConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.default_alpha(text);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.default_alpha(&text);
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.root);
        if let Some(p) = cfg.data.texture_pool.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.data.teacher_weights.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Takes the benchmark's fusion ratio unless the file sets one.
    fn default_alpha(&mut self, text: &str) {
        let explicit = toml::from_str::<toml::Table>(text)
            .ok()
            .and_then(|t| t.get("score").and_then(|s| s.get("alpha")).cloned())
            .is_some();
        if !explicit {
            if let Some(a) = self.data.dataset.as_deref().and_then(dataset_alpha) {
                self.score.alpha = a;
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.memory.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0) || !(t.mining_fraction > 0.0 && t.mining_fraction <= 1.0) {
            return Err(Error::InvalidArgument(
                "batch_size, lr and mining_fraction must be positive (mining_fraction <= 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.score.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} not in [0, 1]", self.score.alpha)));
        }
        Ok(())
    }

    /// SHA-256 over the model and memory settings; guards checkpoint reuse.
    pub fn config_hash(&self) -> String {
        let payload = serde_json::to_string(&(&self.model, &self.memory)).expect("config serializes");
        Sha256::digest(payload.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
