use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution kernels; the only parameters under weight decay.
    Kernel,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Running mean/variance of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: Vec<ParamEntry>,
    pub running: Vec<RunningStats>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar parameter count over entries whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn kernel_ids(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].kind == ParamKind::Kernel)
            .collect()
    }

    /// `Σθ²` over convolution kernels.
    pub fn kernel_sum_squares(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Kernel)
            .map(|p| p.value.sum_squares())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
            && self
                .running
                .iter()
                .all(|r| r.mean.iter().chain(&r.var).all(|v| v.is_finite()))
    }

    /// Exponential moving update of running statistics.
    pub fn update_running(&mut self, id: usize, mean: &[f64], var: &[f64]) {
        let r = &mut self.running[id];
        for (m, b) in r.mean.iter_mut().zip(mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
        }
        for (v, b) in r.var.iter_mut().zip(var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
        }
    }
}

/// Allocates parameters in a deterministic order from a seeded generator.
pub struct ParamBuilder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor) -> usize {
        self.store.params.push(ParamEntry { name, kind, value });
        self.store.params.len() - 1
    }

    /// He-normal kernel `[cout, cin_per_group, k, k]`, std `sqrt(2 / fan_in)`.
    pub fn kernel(&mut self, name: String, shape: [usize; 4]) -> usize {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let len = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(name, ParamKind::Kernel, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: String, kind: ParamKind, channels: usize, value: f64) -> usize {
        self.push(name, kind, Tensor::full([1, channels, 1, 1], value))
    }

    pub fn running(&mut self, name: String, channels: usize) -> usize {
        self.store.running.push(RunningStats {
            name,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        self.store.running.len() - 1
    }
}
