use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::EmaConfig;

/// Number of resolution levels: r, r/2, r/4, r/8, r/16.
pub const SCALES: usize = 5;
/// Branch counts of the four cascaded PMF modules.
pub const PMF_BRANCHES: [usize; 4] = [2, 3, 4, 4];
/// Input spatial extents must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 16;

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Channel count `c` at the full-resolution scale.
    pub base_channels: usize,
    /// Channel multiplier per octave.
    pub channel_growth: usize,
    /// Widths are capped at `channel_cap * base_channels`.
    pub channel_cap: usize,
    pub scales: usize,
    pub pmf_branches: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub ema: EmaConfig,
    pub intra_sde: bool,
    pub inter_sde: bool,
    /// Squeeze ratio of the intra-scale gate.
    pub sde_ratio: usize,
    /// Initialization seed.
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 32,
            channel_growth: 2,
            channel_cap: 16,
            scales: SCALES,
            pmf_branches: PMF_BRANCHES.to_vec(),
            in_channels: 4,
            out_channels: 3,
            ema: EmaConfig::default(),
            intra_sde: true,
            inter_sde: true,
            sde_ratio: 4,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale configuration: c = 8, K = 8.
    pub fn tiny() -> Self {
        NetworkConfig {
            base_channels: 8,
            ema: EmaConfig { bases: 8, ..EmaConfig::default() },
            ..Self::default()
        }
    }

    /// The original architecture without either SDE block.
    pub fn without_sde(mut self) -> Self {
        self.intra_sde = false;
        self.inter_sde = false;
        self
    }

    /// Channel count at `scale` (0 = full resolution).
    pub fn width(&self, scale: usize) -> usize {
        let cap = self.channel_cap * self.base_channels;
        let mut w = self.base_channels;
        for _ in 0..scale {
            w = (w * self.channel_growth).min(cap);
        }
        w
    }

    /// Channel count of the concatenated features entering EMA: every PMF
    /// output branch is recovered to the r/2 width before concatenation.
    pub fn ema_channels(&self) -> usize {
        self.pmf_branches.last().copied().unwrap_or(0) * self.width(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_growth == 0 || self.channel_cap == 0 {
            return Err(config_err!("channel schedule must be positive"));
        }
        if self.scales != SCALES {
            return Err(config_err!("the network uses exactly {} scales, got {}", SCALES, self.scales));
        }
        if self.pmf_branches != PMF_BRANCHES {
            return Err(config_err!(
                "PMF branch counts must be {:?} (four modules, progressive widening), got {:?}",
                PMF_BRANCHES,
                self.pmf_branches
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err!("in/out channel counts must be positive"));
        }
        if self.ema.bases == 0 {
            return Err(config_err!("EMA base count K must be >= 1"));
        }
        if self.ema.iterations == 0 {
            return Err(config_err!("EMA iteration count T must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.ema.momentum) {
            return Err(config_err!("EMA momentum must lie in [0, 1], got {}", self.ema.momentum));
        }
        if self.sde_ratio == 0 {
            return Err(config_err!("SDE squeeze ratio must be >= 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
