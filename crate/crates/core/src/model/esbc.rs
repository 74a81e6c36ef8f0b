//! Redundancy-reducing convolution: band adjustment, spatial reconstruction
//! (gated cross-reconstruction) and band reconstruction (split, transform, fuse).

use super::config::{clamp_conv_groups, clamp_groups, BruWidths, ModelConfig};
use super::layers::{BatchNorm, Conv2d, Session, SqueezeExcite};
use super::params::{ParamBuilder, ParamKind};
use crate::error::Result;
use crate::tensor::Var;

/// Spatial reconstruction unit.
///
/// Group-normalized features are reweighted per band by `|γ|/Σ|γ|`, squashed with a
/// sigmoid and hard-gated into an informative mask `W₁` and its complement `W₂`.
/// The two masked copies of the input are cross-added half against half.
#[derive(Debug, Clone)]
pub struct Sru {
    pub gn_gamma: usize,
    pub gn_beta: usize,
    pub gn_groups: usize,
    pub threshold: f64,
    pub bands: usize,
}

impl Sru {
    pub fn build(b: &mut ParamBuilder, name: &str, bands: usize, gn_groups: usize, threshold: f64) -> Self {
        assert!(bands % 2 == 0, "spatial reconstruction needs an even band count");
        Self {
            gn_gamma: b.constant(format!("{name}.gn.gamma"), ParamKind::NormScale, bands, 1.0),
            gn_beta: b.constant(format!("{name}.gn.beta"), ParamKind::NormShift, bands, 0.0),
            gn_groups: clamp_groups(gn_groups, bands),
            threshold,
            bands,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let gamma = s.p(self.gn_gamma);
        let beta = s.p(self.gn_beta);
        let normed = s.graph.group_norm(x, gamma, beta, self.gn_groups);
        let w_gamma = s.graph.abs_normalize(gamma);
        let reweighted = s.graph.scale_channels(normed, w_gamma);
        let soft = s.graph.sigmoid(reweighted);
        let w1 = s.gate(soft, self.threshold);
        let w2 = s.graph.affine(w1, -1.0, 1.0);
        let x1 = s.graph.mul(w1, x);
        let x2 = s.graph.mul(w2, x);
        let half = self.bands / 2;
        let x11 = s.graph.slice_channels(x1, 0, half);
        let x12 = s.graph.slice_channels(x1, half, half);
        let x21 = s.graph.slice_channels(x2, 0, half);
        let x22 = s.graph.slice_channels(x2, half, half);
        let a = s.graph.add(x11, x22);
        let b = s.graph.add(x21, x12);
        s.graph.concat(&[a, b])
    }
}

/// Band reconstruction unit.
///
/// The upper `⌈αb⌉` bands are squeezed by `r` and passed through a group-wise 3×3
/// plus a point-wise convolution; the lower bands are squeezed, expanded
/// point-wise and concatenated with themselves. The two `b`-band branches are
/// mixed per band with a two-way softmax over their global averages.
#[derive(Debug, Clone)]
pub struct Bru {
    pub widths: BruWidths,
    pub squeeze_upper: Conv2d,
    pub squeeze_lower: Conv2d,
    pub gwc: Conv2d,
    pub pwc_upper: Conv2d,
    pub pwc_lower: Conv2d,
}

impl Bru {
    pub fn build(b: &mut ParamBuilder, name: &str, widths: BruWidths, groups: usize) -> Self {
        let w = widths;
        let groups = clamp_conv_groups(groups, w.upper_squeezed, w.bands);
        Self {
            widths,
            squeeze_upper: Conv2d::build(b, &format!("{name}.squeeze_upper"), w.upper, w.upper_squeezed, 1, 1, false),
            squeeze_lower: Conv2d::build(b, &format!("{name}.squeeze_lower"), w.lower, w.lower_squeezed, 1, 1, false),
            gwc: Conv2d::build(b, &format!("{name}.gwc"), w.upper_squeezed, w.bands, 3, groups, true),
            pwc_upper: Conv2d::build(b, &format!("{name}.pwc_upper"), w.upper_squeezed, w.bands, 1, 1, false),
            pwc_lower: Conv2d::build(
                b,
                &format!("{name}.pwc_lower"),
                w.lower_squeezed,
                w.bands - w.lower_squeezed,
                1,
                1,
                false,
            ),
        }
    }

    /// Returns the fused output and the per-band weights `(β₁, β₂)`.
    pub fn forward_with_weights(&self, s: &mut Session<'_>, x: Var) -> (Var, Var, Var) {
        let w = self.widths;
        let upper = s.graph.slice_channels(x, 0, w.upper);
        let lower = s.graph.slice_channels(x, w.upper, w.lower);
        let x_up = self.squeeze_upper.forward(s, upper);
        let x_low = self.squeeze_lower.forward(s, lower);

        let g = self.gwc.forward(s, x_up);
        let p = self.pwc_upper.forward(s, x_up);
        let y1 = s.graph.add(g, p);

        let expanded = self.pwc_lower.forward(s, x_low);
        let y2 = s.graph.concat(&[expanded, x_low]);

        let s1 = s.graph.global_avg_pool(y1);
        let s2 = s.graph.global_avg_pool(y2);
        let diff = s.graph.sub(s1, s2);
        let beta1 = s.graph.sigmoid(diff);
        let beta2 = s.graph.affine(beta1, -1.0, 1.0);
        let a = s.graph.scale_channels(y1, beta1);
        let b = s.graph.scale_channels(y2, beta2);
        (s.graph.add(a, b), beta1, beta2)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        self.forward_with_weights(s, x).0
    }
}

/// 1×1 band adjustment → SRU → BRU.
#[derive(Debug, Clone)]
pub struct Esbc {
    pub adjust: Conv2d,
    pub sru: Sru,
    pub bru: Bru,
}

impl Esbc {
    pub fn build(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, cfg: &ModelConfig) -> Result<Self> {
        let widths = cfg.bru_widths(cout)?;
        Ok(Self {
            adjust: Conv2d::build(b, &format!("{name}.adjust"), cin, cout, 1, 1, true),
            sru: Sru::build(b, &format!("{name}.sru"), cout, cfg.gn_groups, cfg.gate_threshold),
            bru: Bru::build(b, &format!("{name}.bru"), widths, cfg.gwc_groups),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let x = self.adjust.forward(s, x);
        let x = self.sru.forward(s, x);
        self.bru.forward(s, x)
    }
}

/// The band-changing convolution of a block: ESBCConv, or a plain 3×3 convolution
/// when the ESBC module is ablated.
#[derive(Debug, Clone)]
pub enum BandConv {
    Esbc(Box<Esbc>),
    Plain(Conv2d),
}

impl BandConv {
    pub fn build(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(if cfg.esbc_enabled {
            BandConv::Esbc(Box::new(Esbc::build(b, &format!("{name}.esbc"), cin, cout, cfg)?))
        } else {
            BandConv::Plain(Conv2d::build(b, &format!("{name}.conv"), cin, cout, 3, 1, true))
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        match self {
            BandConv::Esbc(e) => e.forward(s, x),
            BandConv::Plain(c) => c.forward(s, x),
        }
    }
}

/// Band conv → batch norm → ReLU → squeeze-excitation attention.
#[derive(Debug, Clone)]
pub struct Block {
    pub conv: BandConv,
    pub bn: BatchNorm,
    pub attention: SqueezeExcite,
}

impl Block {
    pub fn build(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            conv: BandConv::build(b, name, cin, cout, cfg)?,
            bn: BatchNorm::build(b, &format!("{name}.bn"), cout),
            attention: SqueezeExcite::build(b, &format!("{name}.attention"), cout, cfg.attention_reduction),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let x = self.conv.forward(s, x);
        let x = self.bn.forward(s, x);
        let x = s.graph.relu(x);
        self.attention.forward(s, x)
    }
}
