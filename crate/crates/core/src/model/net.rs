use std::collections::BTreeMap;

use super::config::{Modality, ModelConfig};
use super::esbc::Block;
use super::layers::{Conv2d, ForwardCtx, Session};
use super::params::{ParamBuilder, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Per-modality input blocks, each `[N, bands, S, S]`.
pub type ModalInputs = BTreeMap<Modality, Tensor>;

#[derive(Debug, Clone)]
pub struct Encoder {
    pub in_bands: usize,
    pub stages: Vec<Block>,
}

impl Encoder {
    pub fn build(b: &mut ParamBuilder, name: &str, in_bands: usize, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.stage_widths.len());
        let mut cin = in_bands;
        for (i, &w) in cfg.stage_widths.iter().enumerate() {
            stages.push(Block::build(b, &format!("{name}.stage{}", i + 1), cin, w, cfg)?);
            cin = w;
        }
        Ok(Self { in_bands, stages })
    }

    /// Feature pyramid, finest scale first. Dropout hits the last scale only.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, dropout: f64) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = s.graph.max_pool2(h);
            }
            h = stage.forward(s, h);
            if i + 1 == self.stages.len() {
                h = s.dropout(h, dropout);
            }
            out.push(h);
        }
        out
    }
}

/// Band concatenation followed by a two-convolution sigmoid spatial weighting.
#[derive(Debug, Clone)]
pub struct ModalFusion {
    pub inputs: usize,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ModalFusion {
    pub fn build(b: &mut ParamBuilder, name: &str, inputs: usize, width: usize) -> Self {
        Self {
            inputs,
            conv1: Conv2d::build(b, &format!("{name}.conv1"), inputs * width, width, 3, 1, true),
            conv2: Conv2d::build(b, &format!("{name}.conv2"), width, 1, 3, 1, true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, features: &[Var]) -> Result<Var> {
        if features.len() != self.inputs {
            return Err(Error::Shape(format!(
                "fusion expects {} modalities, got {}",
                self.inputs,
                features.len()
            )));
        }
        let shape0 = s.value(features[0]).shape();
        if features.iter().any(|&f| s.value(f).shape() != shape0) {
            return Err(Error::Shape("fusion inputs disagree in scale".into()));
        }
        let cat = if features.len() == 1 {
            features[0]
        } else {
            s.graph.concat(features)
        };
        let h = self.conv1.forward(s, cat);
        let r = s.graph.relu(h);
        let a = self.conv2.forward(s, r);
        let weight = s.graph.sigmoid(a);
        Ok(s.graph.scale_spatial(r, weight))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Up-stages from coarse to fine; `stages[j]` produces `stage_widths[L-2-j]` bands.
    pub stages: Vec<Block>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let w = &cfg.stage_widths;
        let mut stages = Vec::new();
        for s in (0..w.len() - 1).rev() {
            stages.push(Block::build(b, &format!("decoder.stage{}", s + 1), w[s + 1] + w[s], w[s], cfg)?);
        }
        Ok(Self {
            stages,
            head: Conv2d::build(b, "decoder.head", w[0], 1, 1, 1, true),
        })
    }

    /// `fused` is finest first. Returns the single-band height plane.
    pub fn forward(&self, s: &mut Session<'_>, fused: &[Var]) -> Result<Var> {
        if fused.len() != self.stages.len() + 1 {
            return Err(Error::Shape(format!(
                "decoder expects {} scales, got {}",
                self.stages.len() + 1,
                fused.len()
            )));
        }
        let mut x = *fused.last().expect("non-empty pyramid");
        for (j, stage) in self.stages.iter().enumerate() {
            let skip = fused[fused.len() - 2 - j];
            let up = s.graph.upsample2(x);
            if s.value(up).shape()[2..] != s.value(skip).shape()[2..] {
                return Err(Error::Shape("decoder skip scale mismatch".into()));
            }
            let cat = s.graph.concat(&[up, skip]);
            x = stage.forward(s, cat);
        }
        Ok(self.head.forward(s, x))
    }
}

/// Routing of one modality into the encoders.
#[derive(Debug, Clone)]
pub struct Route {
    pub modality: Modality,
    pub encoder: usize,
    /// 1×1 conv to the shared encoder's input width, when the band counts differ.
    pub adapter: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct Marsnet {
    pub encoders: Vec<Encoder>,
    pub routes: Vec<Route>,
    pub fusions: Vec<ModalFusion>,
    pub decoder: Decoder,
}

/// Intermediate outputs of a forward pass.
pub struct ForwardOutput {
    pub prediction: Var,
    /// Per-modality pyramids (finest first), in configured modality order.
    pub pyramids: Vec<Vec<Var>>,
    pub fused: Vec<Var>,
}

impl Marsnet {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let groups = cfg.encoder_groups();
        let mut encoders = Vec::with_capacity(groups.len());
        let mut routes: Vec<Option<Route>> = vec![None; cfg.modalities.len()];
        for (e, members) in groups.iter().enumerate() {
            let width = members.iter().map(|&i| cfg.bands_of(i)).max().expect("non-empty group");
            let name = if members.len() == 1 {
                format!("encoder.{}", cfg.modalities[members[0]])
            } else {
                format!("encoder.shared{e}")
            };
            encoders.push(Encoder::build(b, &name, width, cfg)?);
            for &i in members {
                let bands = cfg.bands_of(i);
                let adapter = (bands != width).then(|| {
                    Conv2d::build(b, &format!("adapter.{}", cfg.modalities[i]), bands, width, 1, 1, true)
                });
                routes[i] = Some(Route {
                    modality: cfg.modalities[i],
                    encoder: e,
                    adapter,
                });
            }
        }
        let n = cfg.modalities.len();
        let fusions = cfg
            .stage_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| ModalFusion::build(b, &format!("fusion.scale{}", i + 1), n, w))
            .collect();
        let decoder = Decoder::build(b, cfg)?;
        Ok(Self {
            encoders,
            routes: routes.into_iter().map(|r| r.expect("every modality routed")).collect(),
            fusions,
            decoder,
        })
    }
}

/// All learnable state of a network plus the configuration that shapes it.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Marsnet,
}

impl ModelParams {
    /// Seeded He-normal kernels, zero biases, unit/zero normalization affines.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(config.seed);
        let net = Marsnet::build(&mut b, config)?;
        Ok(Self {
            config: config.clone(),
            store: b.store,
            net,
        })
    }

    /// Rebuild the structure for `config` and install `store` after checking names and shapes.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let fresh = Self::init(&config)?;
        if fresh.store.params.len() != store.params.len() || fresh.store.running.len() != store.running.len() {
            return Err(Error::Shape("parameter count does not match config".into()));
        }
        for (a, b) in fresh.store.params.iter().zip(&store.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.kind != b.kind {
                return Err(Error::Shape(format!("parameter `{}` does not match config", b.name)));
            }
        }
        for (a, b) in fresh.store.running.iter().zip(&store.running) {
            if a.name != b.name || a.mean.len() != b.mean.len() || a.var.len() != b.var.len() {
                return Err(Error::Shape(format!("running stats `{}` do not match config", b.name)));
            }
        }
        Ok(Self {
            config,
            store,
            net: fresh.net,
        })
    }

    /// Scalar parameter count of the encoders (adapters excluded).
    pub fn encoder_param_count(&self) -> usize {
        self.store.scalar_count_with_prefix("encoder.")
    }

    fn check_inputs(&self, inputs: &ModalInputs) -> Result<usize> {
        let s = self.config.input_spatial;
        let mut batch = None;
        for (i, m) in self.config.modalities.iter().enumerate() {
            let t = inputs.get(m).ok_or_else(|| Error::MissingModality(m.to_string()))?;
            let want = self.config.bands_of(i);
            if t.c() != want || t.h() != s || t.w() != s {
                return Err(Error::Shape(format!(
                    "{m}: expected [N, {want}, {s}, {s}], got {:?}",
                    t.shape()
                )));
            }
            match batch {
                None => batch = Some(t.n()),
                Some(n) if n != t.n() => return Err(Error::Shape("modalities disagree on batch size".into())),
                _ => {}
            }
        }
        Ok(batch.unwrap_or(0))
    }

    /// Encoders → per-scale fusion → decoder, on a caller-provided session.
    pub fn forward<'a>(&'a self, s: &mut Session<'a>, inputs: &ModalInputs) -> Result<ForwardOutput> {
        self.check_inputs(inputs)?;
        let dropout = self.config.dropout_rate;
        let mut pyramids = Vec::with_capacity(self.net.routes.len());
        for route in &self.net.routes {
            let x = s.input(inputs[&route.modality].clone());
            let x = match &route.adapter {
                Some(a) => a.forward(s, x),
                None => x,
            };
            pyramids.push(self.net.encoders[route.encoder].forward(s, x, dropout));
        }
        let mut fused = Vec::with_capacity(self.net.fusions.len());
        for (scale, fusion) in self.net.fusions.iter().enumerate() {
            let feats: Vec<Var> = pyramids.iter().map(|p| p[scale]).collect();
            fused.push(fusion.forward(s, &feats)?);
        }
        let head = self.net.decoder.forward(s, &fused)?;
        let prediction = if self.config.target_mean == 0.0 && self.config.target_std == 1.0 {
            head
        } else {
            s.graph.affine(head, self.config.target_std, self.config.target_mean)
        };
        Ok(ForwardOutput {
            prediction,
            pyramids,
            fused,
        })
    }

    /// Inference-mode prediction `[N, 1, S, S]`.
    pub fn predict(&self, inputs: &ModalInputs) -> Result<Tensor> {
        let mut s = Session::new(&self.store, ForwardCtx::eval());
        let out = self.forward(&mut s, inputs)?;
        Ok(s.value(out.prediction).clone())
    }

    /// Inference-mode feature pyramid of every modality: `[modality][scale]`.
    pub fn pyramids(&self, inputs: &ModalInputs) -> Result<Vec<Vec<Tensor>>> {
        let mut s = Session::new(&self.store, ForwardCtx::eval());
        let out = self.forward(&mut s, inputs)?;
        Ok(out
            .pyramids
            .iter()
            .map(|p| p.iter().map(|&v| s.value(v).clone()).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::EncoderMode;

    fn small(mode: EncoderMode, esbc: bool) -> ModelConfig {
        ModelConfig {
            stage_widths: vec![8, 16],
            input_spatial: 8,
            encoder_mode: mode,
            esbc_enabled: esbc,
            seed: 3,
            ..Default::default()
        }
    }

    fn inputs(cfg: &ModelConfig, n: usize, seed: u64) -> ModalInputs {
        let mut state = seed;
        cfg.modalities
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let shape = [n, cfg.bands_of(i), cfg.input_spatial, cfg.input_spatial];
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                        ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
                    })
                    .collect();
                (m, Tensor::from_vec(shape, data))
            })
            .collect()
    }

    #[test]
    fn every_mode_runs() {
        for mode in [EncoderMode::Separate, EncoderMode::Shared, EncoderMode::SarShared] {
            for esbc in [true, false] {
                let cfg = small(mode, esbc);
                let p = ModelParams::init(&cfg).unwrap();
                let y = p.predict(&inputs(&cfg, 2, 1)).unwrap();
                assert_eq!(y.shape(), [2, 1, 8, 8]);
                assert!(y.all_finite());
            }
        }
    }

    #[test]
    fn shared_mode_adapters_only_for_narrow_modalities() {
        let p = ModelParams::init(&small(EncoderMode::Shared, true)).unwrap();
        assert_eq!(p.net.encoders.len(), 1);
        let adapted: Vec<bool> = p.net.routes.iter().map(|r| r.adapter.is_some()).collect();
        assert_eq!(adapted, vec![false, true, true, true]);
    }

    #[test]
    fn missing_modality_is_named() {
        let cfg = small(EncoderMode::Separate, true);
        let p = ModelParams::init(&cfg).unwrap();
        let mut x = inputs(&cfg, 1, 2);
        x.remove(&Modality::Palsar2);
        let err = p.predict(&x).unwrap_err();
        assert!(err.to_string().contains("palsar2"), "{err}");
    }

    #[test]
    fn wrong_spatial_size_rejected() {
        let cfg = small(EncoderMode::Separate, true);
        let p = ModelParams::init(&cfg).unwrap();
        let mut x = inputs(&cfg, 1, 2);
        x.insert(Modality::Sentinel2, Tensor::zeros([1, 17, 4, 4]));
        assert!(matches!(p.predict(&x), Err(Error::Shape(_))));
    }
}
