use serde::{Deserialize, Serialize};

use crate::data::{AugmentParams, PreprocessParams};
use crate::error::{config_err, Result};
use crate::network::NetworkConfig;

/// Environment variable that overrides [`TrainConfig::seed`].
pub const SEED_ENV: &str = "HNF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub betas: [f64; 2],
    pub initial_lr: f64,
    /// Coupled L2 penalty: `weight_decay * w` is added to every gradient.
    pub weight_decay: f64,
    pub poly_power: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Training crop extents.
    pub patch: [usize; 3],
    /// Optimizer steps per epoch; `None` means one pass over the studies.
    pub steps_per_epoch: Option<usize>,
    /// Probability that a crop is forced to contain foreground.
    pub fg_prob: f64,
    pub augment: AugmentParams,
    pub preprocess: PreprocessParams,
    /// Write a checkpoint every this many epochs (0: final checkpoint only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            warmup_epochs: 5,
            batch_size: 4,
            betas: [0.9, 0.999],
            initial_lr: 1e-3,
            weight_decay: 1e-5,
            poly_power: 0.9,
            adam_eps: 1e-8,
            seed: 0,
            patch: [128; 3],
            steps_per_epoch: None,
            fg_prob: 0.5,
            augment: AugmentParams::default(),
            preprocess: PreprocessParams::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("epochs must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(config_err!("warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(config_err!("batch_size and steps_per_epoch must be positive"));
        }
        let rate_ok = |v: f64| v.is_finite() && v > 0.0;
        if !rate_ok(self.initial_lr) || !rate_ok(self.poly_power) || !rate_ok(self.adam_eps) {
            return Err(config_err!("initial_lr, poly_power and adam_eps must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(config_err!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(0.0..=1.0).contains(&self.fg_prob) {
            return Err(config_err!("fg_prob must lie in [0, 1], got {}", self.fg_prob));
        }
        if self.patch.contains(&0) {
            return Err(config_err!("patch extents must be positive, got {:?}", self.patch));
        }
        self.preprocess.validate()
    }

    /// Applies the `HNF_SEED` override if the variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| config_err!("{} must be an unsigned integer, got {:?}", SEED_ENV, v))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Centered region that is segmented; clamped to the volume.
    pub center_crop: [usize; 3],
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    /// Average over the identity and the seven axis-flip views.
    pub tta_enabled: bool,
    /// Predicted ET smaller than this many voxels is relabeled as core.
    pub et_threshold: usize,
    /// Probability threshold applied to each region map.
    pub threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            center_crop: [176, 224, 155],
            patch: [128; 3],
            stride: [32, 32, 27],
            tta_enabled: true,
            et_threshold: 200,
            threshold: 0.5,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.patch[a] == 0 || self.center_crop[a] == 0 {
                return Err(config_err!("patch and crop extents must be positive"));
            }
            if self.stride[a] == 0 || self.stride[a] > self.patch[a] {
                return Err(config_err!("stride {:?} must be positive and at most the patch {:?}", self.stride, self.patch));
            }
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(config_err!("threshold must be non-negative, got {}", self.threshold));
        }
        Ok(())
    }
}

/// Everything a training run needs; the JSON accepted by `hnf train --config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        if !v.is_object() {
            return Err(config_err!("run config must be a JSON object"));
        }
        let cfg: RunConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.infer.validate()
    }

    /// Desk-scale settings: tiny network, 32^3 patches, inference on the
    /// whole (small) volume.
    pub fn desk() -> Self {
        RunConfig {
            network: NetworkConfig::tiny(),
            train: TrainConfig {
                epochs: 75,
                warmup_epochs: 2,
                batch_size: 1,
                initial_lr: 1e-2,
                patch: [32; 3],
                augment: AugmentParams::none(),
                ..TrainConfig::default()
            },
            infer: InferConfig { patch: [32; 3], stride: [16; 3], et_threshold: 8, ..InferConfig::default() },
        }
    }
}
