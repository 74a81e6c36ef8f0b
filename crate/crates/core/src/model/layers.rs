//! Parameterized building blocks and the forward session that binds them to a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamBuilder, ParamKind, ParamStore};
use crate::tensor::graph::BatchStats;
use crate::tensor::{GateBackward, Graph, Tensor, Var};

#[derive(Debug, Clone, Default)]
enum MaskTape {
    #[default]
    Off,
    Record(Vec<Tensor>),
    Replay { masks: Vec<Tensor>, next: usize },
}

/// Mode switches and side channels of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub train: bool,
    pub gate_backward: GateBackward,
    rng: ChaCha8Rng,
    masks: MaskTape,
    /// Batch statistics of every training-mode batch norm, keyed by running-stat id.
    pub bn_updates: Vec<(usize, BatchStats)>,
}

impl ForwardCtx {
    /// Inference: running statistics, no dropout.
    pub fn eval() -> Self {
        Self {
            train: false,
            gate_backward: GateBackward::FixedMask,
            rng: ChaCha8Rng::seed_from_u64(0),
            masks: MaskTape::Off,
            bn_updates: Vec::new(),
        }
    }

    /// Training: batch statistics and dropout drawn from `seed`.
    pub fn train(seed: u64, gate_backward: GateBackward) -> Self {
        Self {
            train: true,
            gate_backward,
            rng: ChaCha8Rng::seed_from_u64(seed),
            masks: MaskTape::Off,
            bn_updates: Vec::new(),
        }
    }

    /// Record every gate and dropout mask drawn during the pass.
    pub fn recording(mut self) -> Self {
        self.masks = MaskTape::Record(Vec::new());
        self
    }

    /// Reuse masks from an earlier recorded pass, in draw order.
    pub fn replaying(mut self, masks: Vec<Tensor>) -> Self {
        self.masks = MaskTape::Replay { masks, next: 0 };
        self
    }

    pub fn take_masks(&mut self) -> Vec<Tensor> {
        match std::mem::take(&mut self.masks) {
            MaskTape::Record(m) | MaskTape::Replay { masks: m, .. } => m,
            MaskTape::Off => Vec::new(),
        }
    }

    fn replayed(&mut self) -> Option<Tensor> {
        match &mut self.masks {
            MaskTape::Replay { masks, next } => {
                let m = masks.get(*next).cloned().expect("replay tape exhausted");
                *next += 1;
                Some(m)
            }
            _ => None,
        }
    }

    fn note(&mut self, mask: &Tensor) {
        if let MaskTape::Record(v) = &mut self.masks {
            v.push(mask.clone());
        }
    }
}

/// A tape bound to a parameter store for one forward (and optional backward) pass.
pub struct Session<'a> {
    pub graph: Graph<'a>,
    pub store: &'a ParamStore,
    pub ctx: ForwardCtx,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, ctx: ForwardCtx) -> Self {
        Self {
            graph: Graph::new(),
            store,
            ctx,
        }
    }

    pub fn p(&mut self, id: usize) -> Var {
        self.graph.param(id, self.store.value(id))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Hard gate with optional replay of a recorded mask.
    pub fn gate(&mut self, s: Var, threshold: f64) -> Var {
        let replay = self.ctx.replayed();
        let mode = self.ctx.gate_backward;
        let v = self.graph.gate(s, threshold, replay, mode);
        let mask = self.graph.value(v).clone();
        self.ctx.note(&mask);
        v
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.ctx.train || rate == 0.0 {
            return x;
        }
        let mask = match self.ctx.replayed() {
            Some(m) => m,
            None => {
                let keep = 1.0 - rate;
                let shape = self.graph.value(x).shape();
                let rng = &mut self.ctx.rng;
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                Tensor::from_vec(shape, data)
            }
        };
        self.ctx.note(&mask);
        self.graph.mul_const(x, mask)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: Option<usize>,
    pub groups: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn build(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> Self {
        let weight = b.kernel(format!("{name}.weight"), [cout, cin / groups, k, k]);
        let bias = bias.then(|| b.constant(format!("{name}.bias"), ParamKind::Bias, cout, 0.0));
        Self {
            weight,
            bias,
            groups,
            cin,
            cout,
            k,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let w = s.p(self.weight);
        let b = self.bias.map(|id| s.p(id));
        s.graph.conv2d(x, w, b, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running: usize,
}

impl BatchNorm {
    pub fn build(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Self {
            gamma: b.constant(format!("{name}.gamma"), ParamKind::NormScale, channels, 1.0),
            beta: b.constant(format!("{name}.beta"), ParamKind::NormShift, channels, 0.0),
            running: b.running(format!("{name}.running"), channels),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        if s.ctx.train {
            let (y, stats) = s.graph.batch_norm_train(x, g, b);
            s.ctx.bn_updates.push((self.running, stats));
            y
        } else {
            let r = &s.store.running[self.running];
            s.graph.batch_norm_eval(x, g, b, &r.mean, &r.var)
        }
    }
}

/// Band-wise squeeze-excitation: pool → bottleneck → sigmoid scale per band.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl SqueezeExcite {
    pub fn build(b: &mut ParamBuilder, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            reduce: Conv2d::build(b, &format!("{name}.reduce"), channels, hidden, 1, 1, true),
            expand: Conv2d::build(b, &format!("{name}.expand"), hidden, channels, 1, 1, true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Var {
        let pooled = s.graph.global_avg_pool(x);
        let h = self.reduce.forward(s, pooled);
        let h = s.graph.relu(h);
        let e = self.expand.forward(s, h);
        let scale = s.graph.sigmoid(e);
        s.graph.scale_channels(x, scale)
    }
}
