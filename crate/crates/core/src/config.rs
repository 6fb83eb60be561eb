//! Run configuration: one TOML file with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Blocks, ModelConfig};
use crate::postprocess::SoftNmsConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub train_images: usize,
    pub test_images: usize,
    pub tile: usize,
    pub overlap: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { synth: SynthConfig::default(), train_images: 200, test_images: 50, tile: 64, overlap: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub decay_every_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of horizontally flipping each training sample.
    pub flip_prob: f64,
    /// Joint gradient norm cap applied before each SGD step; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 0.02,
            lr_decay_factor: 10.0,
            decay_every_epochs: 10,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            seed: 0,
            flip_prob: 0.5,
            max_grad_norm: 5.0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 1e-4, divided by 10 every 10 epochs, 30 epochs,
    /// plain SGD without gradient clipping.
    pub fn full_scale() -> Self {
        TrainConfig { base_lr: 1e-4, max_grad_norm: 0.0, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs >= 1
            && self.base_lr > 0.0
            && self.base_lr.is_finite()
            && self.lr_decay_factor > 0.0
            && self.decay_every_epochs >= 1
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.max_grad_norm >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub nms: SoftNmsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.validate()?;
        self.train.validate()?;
        if self.data.overlap >= self.data.tile {
            return Err(Error::Config("data.overlap must be smaller than data.tile".into()));
        }
        if self.data.tile % self.model.backbone.cumulative_stride() != 0 {
            return Err(Error::Config(format!(
                "data.tile {} is not divisible by the backbone stride {}",
                self.data.tile,
                self.model.backbone.cumulative_stride()
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical serialization; identifies a run setup.
    pub fn identity_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_blocks(&self, blocks: Blocks) -> Self {
        let mut c = self.clone();
        c.model.blocks = blocks;
        c
    }
}

/// Rows of the ablation table as `(name, blocks)`; row (a), refinement
/// without a composite backbone, has no defined architecture and is absent.
pub fn ablation_rows() -> Vec<(&'static str, Blocks)> {
    let b = |composite, refine, dce, mama| Blocks { composite, refine, dce, mama };
    vec![
        ("base", b(false, false, false, false)),
        ("b", b(true, false, false, false)),
        ("c", b(true, true, false, false)),
        ("d", b(true, false, true, false)),
        ("e", b(true, false, false, true)),
        ("f", b(true, true, true, false)),
        ("g", b(true, true, false, true)),
        ("h", b(true, true, true, true)),
    ]
}

pub fn ablation_row(name: &str) -> Result<Blocks> {
    if name == "a" {
        return Err(Error::Config("row a (refinement without a composite backbone) is not defined".into()));
    }
    ablation_rows()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| b)
        .ok_or_else(|| Error::Config(format!("unknown ablation row `{name}`")))
}
