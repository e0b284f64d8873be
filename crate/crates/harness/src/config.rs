//! Training configuration, read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use seanet_core::signal::Scenario;
use seanet_core::NetworkConfig;
use serde::{Deserialize, Serialize};

/// How the decay factor is applied every `decay_every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `lr · decay^floor(epoch / every)`.
    #[default]
    Multiplicative,
    /// `lr · (1 − (1 − decay)·floor(epoch / every))`, floored at zero.
    Subtractive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Source of training and validation mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Mixtures generated on the fly from the synthetic source bank.
    Synthetic {
        train_count: usize,
        val_count: usize,
        scenarios: Vec<Scenario>,
        /// Seed of the data stream, independent of the model seed.
        seed: u64,
    },
    /// Line-delimited manifests; paths resolve relative to each manifest.
    Manifest { train: PathBuf, val: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic { train_count: 200, val_count: 40, scenarios: Scenario::GRID.to_vec(), seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub decay_mode: DecayMode,
    pub max_epochs: usize,
    pub validate_every: usize,
    pub segment_seconds: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub adam: AdamConfig,
    /// Parameters are initialised from this checkpoint where names and
    /// shapes match; new modules keep their fresh initialisation.
    pub init_from: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub network: NetworkConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 0.97,
            decay_every: 3,
            decay_mode: DecayMode::Multiplicative,
            max_epochs: 150,
            validate_every: 3,
            segment_seconds: 2.0,
            batch_size: 4,
            seed: 0,
            grad_clip: 5.0,
            adam: AdamConfig::default(),
            init_from: None,
            out_dir: PathBuf::from("runs/default"),
            network: NetworkConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small network and short clips for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            max_epochs: 30,
            segment_seconds: 1.0,
            network: NetworkConfig::tiny(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing training config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            bail!("lr must be positive, got {}", self.lr);
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            bail!("lr_decay must be in (0, 1], got {}", self.lr_decay);
        }
        for (name, v) in [
            ("decay_every", self.decay_every),
            ("max_epochs", self.max_epochs),
            ("validate_every", self.validate_every),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                bail!("{name} must be positive");
            }
        }
        if !(self.segment_seconds > 0.0) || !(self.grad_clip > 0.0) {
            bail!("segment_seconds and grad_clip must be positive");
        }
        if let DataConfig::Synthetic { train_count, val_count, scenarios, .. } = &self.data {
            if *train_count == 0 || *val_count == 0 || scenarios.is_empty() {
                bail!("synthetic data needs positive counts and at least one scenario");
            }
        }
        self.network.validate()?;
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_every) as f64;
        match self.decay_mode {
            DecayMode::Multiplicative => self.lr * self.lr_decay.powf(steps),
            DecayMode::Subtractive => self.lr * (1.0 - (1.0 - self.lr_decay) * steps).max(0.0),
        }
    }

    /// Number of samples in one training segment.
    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * self.network.sample_rate as f64).round() as usize
    }
}
