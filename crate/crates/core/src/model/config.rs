use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modulation::ModulationPolicy;

/// Geometry of the toy restoration network.
///
/// `levels` counts resolution levels: level `L` runs at `1/2^L` of the input
/// resolution with `base_channels · 2^L` channels, and the deepest level is
/// the bottleneck. `levels = 1` is a plain (non-U-Net) transformer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyIptConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub patch_size: usize,
    pub ffn_ratio: usize,
    pub heads: usize,
    pub policy: ModulationPolicy,
}

impl Default for TinyIptConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            levels: 2,
            blocks_per_level: 2,
            patch_size: 32,
            ffn_ratio: 2,
            heads: 1,
            policy: ModulationPolicy::default(),
        }
    }
}

impl TinyIptConfig {
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| {
            Err(Error::Config {
                path: path.into(),
                message: message.into(),
            })
        };
        if self.base_channels == 0 {
            return bad("model.base_channels", "must be positive");
        }
        if self.levels == 0 || self.levels > 5 {
            return bad("model.levels", "must be in 1..=5");
        }
        if self.ffn_ratio == 0 {
            return bad("model.ffn_ratio", "must be positive");
        }
        if self.heads != 1 {
            return bad("model.heads", "only single-head channel attention is implemented");
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(self.spatial_multiple()) {
            return bad("model.patch_size", "must be a positive multiple of 2^levels");
        }
        self.policy
            .validate()
            .or_else(|e| bad("model.policy.rank", &e.to_string()))
    }
}
