use std::path::Path;

use anyhow::{Context, Result};
use foldless::dataio::SynthConfig;
use foldless::losses::LossConfig;
use foldless::nets::ArchConfig;
use foldless::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Architecture settings that do not depend on the data; image extents come
/// from the training pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSettings {
    pub levels: usize,
    /// Base channel count; 0 picks 16 for 2D and 8 for 3D.
    pub base_channels: usize,
    pub kernel: usize,
    pub refine_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for ArchSettings {
    fn default() -> Self {
        let d = ArchConfig::for_dims(&[64, 64]);
        Self {
            levels: d.levels,
            base_channels: 0,
            kernel: d.kernel,
            refine_hidden: d.refine_hidden,
            leaky_slope: d.leaky_slope,
        }
    }
}

impl ArchSettings {
    pub fn for_dims(&self, dims: &[usize], refine: bool) -> ArchConfig {
        let base = ArchConfig::for_dims(dims);
        ArchConfig {
            levels: self.levels,
            base_channels: if self.base_channels == 0 {
                base.base_channels
            } else {
                self.base_channels
            },
            kernel: self.kernel,
            refine_hidden: self.refine_hidden,
            leaky_slope: self.leaky_slope,
            ..base
        }
        .with_refine(refine)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub arch: ArchSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Writes the effective configuration so the run can be repeated.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        let text = toml::to_string(self).context("serializing config")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
