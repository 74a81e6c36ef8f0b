use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::GateBackward;

/// The four input modalities, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Sentinel2,
    Sentinel1,
    Palsar2,
    Ancillary,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Sentinel2,
        Modality::Sentinel1,
        Modality::Palsar2,
        Modality::Ancillary,
    ];

    /// Band count of the assembled stack for this modality.
    pub fn band_count(self) -> usize {
        match self {
            Modality::Sentinel2 => 17,
            Modality::Sentinel1 => 9,
            Modality::Palsar2 => 4,
            Modality::Ancillary => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Sentinel2 => "sentinel2",
            Modality::Sentinel1 => "sentinel1",
            Modality::Palsar2 => "palsar2",
            Modality::Ancillary => "ancillary",
        }
    }

    pub fn is_sar(self) -> bool {
        matches!(self, Modality::Sentinel1 | Modality::Palsar2)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// One encoder per modality.
    Separate,
    /// All modalities pass through one encoder.
    Shared,
    /// Sentinel-1 and PALSAR-2 share an encoder; the others get their own.
    SarShared,
}

/// Architecture switches and hyperparameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stage_widths: Vec<usize>,
    pub input_spatial: usize,
    pub modalities: Vec<Modality>,
    /// Input band count per entry of `modalities`; empty means the stack defaults.
    pub input_bands: Vec<usize>,
    pub encoder_mode: EncoderMode,
    pub esbc_enabled: bool,
    pub bru_alpha: f64,
    pub squeeze_ratio: usize,
    pub gwc_groups: usize,
    pub gn_groups: usize,
    pub gate_threshold: f64,
    pub gate_backward: GateBackward,
    pub dropout_rate: f64,
    /// Bottleneck ratio of the squeeze-excitation block attention.
    pub attention_reduction: usize,
    /// The head output is mapped to meters as `target_mean + target_std · y`.
    /// Fixed per model (fitted on training labels), not learned.
    pub target_mean: f64,
    pub target_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![64, 128, 256, 512],
            input_spatial: 64,
            modalities: Modality::ALL.to_vec(),
            input_bands: Vec::new(),
            encoder_mode: EncoderMode::Separate,
            esbc_enabled: true,
            bru_alpha: 0.5,
            squeeze_ratio: 2,
            gwc_groups: 2,
            gn_groups: 16,
            gate_threshold: 0.5,
            gate_backward: GateBackward::FixedMask,
            dropout_rate: 0.25,
            attention_reduction: 4,
            target_mean: 0.0,
            target_std: 1.0,
            seed: 0,
        }
    }
}

/// Largest divisor of `bands` not exceeding `requested`.
pub fn clamp_groups(requested: usize, bands: usize) -> usize {
    (1..=requested.max(1).min(bands)).rev().find(|g| bands % g == 0).unwrap_or(1)
}

/// Largest group count not above `requested` that divides both `cin` and `cout`.
pub fn clamp_conv_groups(requested: usize, cin: usize, cout: usize) -> usize {
    let (mut a, mut b) = (cin, cout);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    clamp_groups(requested, a)
}

/// Split widths of the band reconstruction unit for `bands` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BruWidths {
    pub bands: usize,
    pub upper: usize,
    pub lower: usize,
    pub upper_squeezed: usize,
    pub lower_squeezed: usize,
}

impl ModelConfig {
    pub fn bands_of(&self, idx: usize) -> usize {
        self.input_bands
            .get(idx)
            .copied()
            .unwrap_or_else(|| self.modalities[idx].band_count())
    }

    /// Spatial size of the feature maps at each stage.
    pub fn stage_spatial(&self) -> Vec<usize> {
        (0..self.stage_widths.len())
            .map(|i| self.input_spatial >> i)
            .collect()
    }

    pub fn bru_widths(&self, bands: usize) -> Result<BruWidths> {
        let upper = (self.bru_alpha * bands as f64).ceil() as usize;
        let lower = bands.saturating_sub(upper);
        let r = self.squeeze_ratio;
        let bad = |why: &str| Error::Config(format!("band reconstruction at {bands} bands: {why}"));
        if upper == 0 || lower == 0 {
            return Err(bad("split leaves an empty branch"));
        }
        if upper % r != 0 || lower % r != 0 {
            return Err(bad("split widths not divisible by squeeze_ratio"));
        }
        let (us, ls) = (upper / r, lower / r);
        if ls >= bands {
            return Err(bad("lower branch wider than the block"));
        }
        Ok(BruWidths {
            bands,
            upper,
            lower,
            upper_squeezed: us,
            lower_squeezed: ls,
        })
    }

    /// Modality indices routed to each encoder, in encoder order.
    pub fn encoder_groups(&self) -> Vec<Vec<usize>> {
        match self.encoder_mode {
            EncoderMode::Separate => (0..self.modalities.len()).map(|i| vec![i]).collect(),
            EncoderMode::Shared => vec![(0..self.modalities.len()).collect()],
            EncoderMode::SarShared => {
                let mut groups: Vec<Vec<usize>> = Vec::new();
                let mut sar: Option<usize> = None;
                for (i, m) in self.modalities.iter().enumerate() {
                    if m.is_sar() {
                        match sar {
                            Some(g) => groups[g].push(i),
                            None => {
                                sar = Some(groups.len());
                                groups.push(vec![i]);
                            }
                        }
                    } else {
                        groups.push(vec![i]);
                    }
                }
                groups
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.stage_widths.is_empty() {
            return cfg("stage_widths must not be empty".into());
        }
        if self.stage_widths.windows(2).any(|w| w[0] >= w[1]) {
            return cfg("stage_widths must be strictly increasing".into());
        }
        if self.stage_widths.iter().any(|w| w % 2 != 0) {
            return cfg("stage widths must be even".into());
        }
        let stages = self.stage_widths.len();
        if self.input_spatial == 0 || self.input_spatial % (1 << (stages - 1)) != 0 {
            return cfg(format!(
                "input_spatial {} not divisible by 2^{}",
                self.input_spatial,
                stages - 1
            ));
        }
        if self.modalities.is_empty() {
            return cfg("at least one modality is required".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return cfg("duplicate modality".into());
        }
        if !self.input_bands.is_empty() && self.input_bands.len() != self.modalities.len() {
            return cfg("input_bands must list one count per modality".into());
        }
        if (0..self.modalities.len()).any(|i| self.bands_of(i) == 0) {
            return cfg("input band counts must be positive".into());
        }
        if !(self.bru_alpha > 0.0 && self.bru_alpha < 1.0) {
            return cfg("bru_alpha must lie in (0, 1)".into());
        }
        if self.squeeze_ratio == 0 || self.gwc_groups == 0 || self.gn_groups == 0 || self.attention_reduction == 0 {
            return cfg("ratios and group counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return cfg("dropout_rate must lie in [0, 1)".into());
        }
        if !(self.target_std > 0.0 && self.target_std.is_finite() && self.target_mean.is_finite()) {
            return cfg("target_std must be positive and target_mean finite".into());
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return cfg("gate_threshold must lie in [0, 1]".into());
        }
        if self.esbc_enabled {
            for &w in &self.stage_widths {
                self.bru_widths(w)?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
