//! TOML pipeline configuration. Every section and key is optional; missing
//! values take their defaults and unknown keys are rejected.
//!
//! ```toml
//! [scene]
//! n_scenes = 50
//!
//! [train]
//! epochs = 30
//! [train.augment]
//! min_crop_ratio = 0.6
//!
//! [rerank]
//! w = 0.25
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::TrainConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::rerank::{DEFAULT_COMPARE_SIZE, DEFAULT_POOL_S, DEFAULT_W};
use crate::synth::SceneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub w: f64,
    pub s: usize,
    pub compare_w: usize,
    pub compare_h: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self { w: DEFAULT_W, s: DEFAULT_POOL_S, compare_w: DEFAULT_COMPARE_SIZE.0, compare_h: DEFAULT_COMPARE_SIZE.1 }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("rerank.w must be >= 0, got {}", self.w)));
        }
        if self.s == 0 || self.compare_w == 0 || self.compare_h == 0 {
            return Err(Error::Config("rerank.s and the comparison size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub rerank: RerankConfig,
    pub eval: EvalConfig,
    /// Number of unlabeled masks generated for training.
    pub train_masks: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            train: TrainConfig::default(),
            rerank: RerankConfig::default(),
            eval: EvalConfig::default(),
            train_masks: 200,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.rerank.validate()?;
        if self.train_masks == 0 {
            return Err(Error::Config("train_masks must be positive".into()));
        }
        self.eval.validate()
    }

    /// Applies a global seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.train.seed = seed;
        self
    }
}
