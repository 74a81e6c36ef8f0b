//! Run configuration shared by every pipeline command.
//!
//! One TOML document with a section per command. Unknown keys are rejected.
//! Every random component draws its seed from the root `seed`; per-section
//! seed fields are overwritten by [`RunConfig::resolve_seeds`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AblationGrid;
use crate::gedi::FOOTPRINT_DIAMETER_M;
use crate::model::ModelConfig;
use crate::raster::patches::PATCH_SIZE;
use crate::seed::derive_seed;
use crate::synth::SyntheticWorld;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Forest-mask values above this count as forest.
    pub forest_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { forest_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    /// RH80/RH98 threshold for the offset stratification.
    pub ratio_threshold: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self { ratio_threshold: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    /// Radius of the SAR speckle filter in meters; 0 disables it.
    pub speckle_radius_m: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self { speckle_radius_m: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchifyConfig {
    pub patch_size: usize,
    pub footprint_diameter_m: f64,
}

impl Default for PatchifyConfig {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            footprint_diameter_m: FOOTPRINT_DIAMETER_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub footprint_diameter_m: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            footprint_diameter_m: FOOTPRINT_DIAMETER_M,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramConfig {
    pub bin_width_m: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self { bin_width_m: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SyntheticWorld,
    pub filter: FilterConfig,
    pub calibrate: CalibrateConfig,
    pub stack: StackConfig,
    pub patchify: PatchifyConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub histogram: HistogramConfig,
    pub ablate: AblationGrid,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.resolve_seeds();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Seed for a named component.
    pub fn component_seed(&self, component: &str) -> u64 {
        derive_seed(self.seed, component)
    }

    pub fn resolve_seeds(&mut self) {
        self.synth.seed = self.component_seed("synth");
        self.model.seed = self.component_seed("model");
        self.train.seed = self.component_seed("train");
    }

    pub fn split_seed(&self) -> u64 {
        self.component_seed("split")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.patchify.patch_size != self.model.input_spatial {
            return Err(Error::Config(format!(
                "patchify.patch_size {} differs from model.input_spatial {}",
                self.patchify.patch_size, self.model.input_spatial
            )));
        }
        if !(self.stack.speckle_radius_m >= 0.0) {
            return Err(Error::Config("stack.speckle_radius_m must be non-negative".into()));
        }
        if !(self.histogram.bin_width_m > 0.0) || !(self.patchify.footprint_diameter_m > 0.0) {
            return Err(Error::Config("bin width and footprint diameter must be positive".into()));
        }
        Ok(())
    }
}
