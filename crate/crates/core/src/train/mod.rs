//! Masked regression objective, Adam training with early stopping, and tiled
//! wall-to-wall prediction.

mod predict;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{ForwardCtx, Session};
use crate::model::{ModalInputs, ModelConfig, ModelParams, ParamKind, ParamStore};
use crate::raster::PatchSample;
use crate::tensor::{Tensor, Var};

pub use predict::predict_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub l2_lambda: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 50,
            batch_size: 64,
            l2_lambda: 1e-5,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.max_epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "learning_rate, max_epochs, batch_size and early_stop_patience must be positive".into(),
            ));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::Config("l2_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub steps: usize,
    /// Training batches without any labeled pixel.
    pub empty_batches: usize,
    pub stopped_early: bool,
    /// Elapsed seconds per epoch; kept out of the serialized history so that
    /// reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_seconds: Vec<f64>,
}

/// One line of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// Stacks samples into model inputs plus `[N,1,P,P]` label and mask tensors.
pub fn batch_tensors(samples: &[&PatchSample]) -> Result<(ModalInputs, Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let p = first.size();
    let mut inputs = ModalInputs::new();
    for m in first.inputs.keys() {
        let parts: Vec<&Tensor> = samples
            .iter()
            .map(|s| s.inputs.get(m).ok_or_else(|| Error::MissingModality(m.to_string())))
            .collect::<Result<_>>()?;
        inputs.insert(*m, Tensor::stack_batch(&parts));
    }
    let n = samples.len();
    let label = Tensor::from_vec([n, 1, p, p], samples.iter().flat_map(|s| s.label.iter().copied()).collect());
    let mask = Tensor::from_vec(
        [n, 1, p, p],
        samples
            .iter()
            .flat_map(|s| s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
            .collect(),
    );
    Ok((inputs, label, mask))
}

/// Mean and population standard deviation of all labeled pixels, used to set
/// the model's output scaling. The deviation falls back to 1 for constant labels.
pub fn label_stats(samples: &[PatchSample]) -> Result<(f64, f64)> {
    let values: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.label.iter().zip(&s.mask).filter(|(_, &m)| m).map(|(&v, _)| v))
        .collect();
    if values.is_empty() {
        return Err(Error::Insufficient("no labeled pixels in the training set".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mean, if sd > 1e-9 { sd } else { 1.0 }))
}

/// `config` with its output scaling fitted to the labeled pixels of `train`.
pub fn with_target_scaling(config: &ModelConfig, train: &[PatchSample]) -> Result<ModelConfig> {
    let (target_mean, target_std) = label_stats(train)?;
    Ok(ModelConfig {
        target_mean,
        target_std,
        ..config.clone()
    })
}

/// Masked MSE plus `λ·Σθ²` over every convolution kernel, as a graph node.
pub fn masked_loss_var(s: &mut Session<'_>, pred: Var, label: Tensor, mask: Tensor, lambda: f64) -> Result<Var> {
    let shape = s.value(pred).shape();
    if label.shape() != shape || mask.shape() != shape {
        return Err(Error::Shape(format!(
            "loss: prediction {shape:?} vs label {:?} / mask {:?}",
            label.shape(),
            mask.shape()
        )));
    }
    let mse = s.graph.masked_mse(pred, label, mask);
    if lambda == 0.0 {
        return Ok(mse);
    }
    let kernels: Vec<Var> = s.store.kernel_ids().into_iter().map(|id| s.p(id)).collect();
    let reg = s.graph.sum_squares(&kernels);
    let reg = s.graph.affine(reg, lambda, 0.0);
    Ok(s.graph.add(mse, reg))
}

/// Masked MSE of `pred` plus `λ·Σθ²` over the kernels of `store`.
pub fn masked_loss(pred: &Tensor, label: &Tensor, mask: &Tensor, store: &ParamStore, lambda: f64) -> Result<f64> {
    let (sse, count) = masked_sse(pred, label, mask)?;
    let mse = if count > 0 { sse / count as f64 } else { 0.0 };
    Ok(mse + lambda * store.kernel_sum_squares())
}

fn masked_sse(pred: &Tensor, label: &Tensor, mask: &Tensor) -> Result<(f64, usize)> {
    if pred.shape() != label.shape() || pred.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "loss: prediction {:?} vs label {:?} / mask {:?}",
            pred.shape(),
            label.shape(),
            mask.shape()
        )));
    }
    let mut sse = 0.0;
    let mut count = 0;
    for ((p, l), m) in pred.data().iter().zip(label.data()).zip(mask.data()) {
        if *m != 0.0 {
            sse += (p - l) * (p - l);
            count += 1;
        }
    }
    Ok((sse, count))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let (m, v) = (self.m[*id].data_mut(), self.v[*id].data_mut());
            let theta = store.params[*id].value.data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                theta[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Incremental optimizer state over one parameter set.
pub struct Trainer {
    pub params: ModelParams,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    pub steps: usize,
    pub empty_batches: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&params.store, config.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            params,
            config,
            adam,
            rng,
            steps: 0,
            empty_batches: 0,
        })
    }

    /// One training-mode forward/backward pass and Adam update; returns the
    /// batch loss before the update.
    pub fn step(&mut self, batch: &[&PatchSample]) -> Result<f64> {
        let (inputs, label, mask) = batch_tensors(batch)?;
        if mask.data().iter().all(|&m| m == 0.0) {
            self.empty_batches += 1;
            log::warn!("training batch {} has no labeled pixels", self.steps);
        }
        let ctx = ForwardCtx::train(self.rng.next_u64(), self.params.config.gate_backward);
        let (loss, grads, bn) = {
            let mut s = Session::new(&self.params.store, ctx);
            let out = self.params.forward(&mut s, &inputs)?;
            let loss = masked_loss_var(&mut s, out.prediction, label, mask, self.config.l2_lambda)?;
            let value = s.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: 0,
                    step: self.steps,
                    loss: value,
                });
            }
            let g = s.graph.backward(loss);
            let grads: Vec<(usize, Tensor)> = s
                .graph
                .bound_params()
                .into_iter()
                .filter_map(|(id, var)| g.get(var).map(|t| (id, t.clone())))
                .collect();
            (value, grads, std::mem::take(&mut s.ctx.bn_updates))
        };
        self.adam.step(&mut self.params.store, &grads);
        for (id, stats) in bn {
            self.params.store.update_running(id, &stats.mean, &stats.var);
        }
        self.steps += 1;
        Ok(loss)
    }

    /// Inference-mode loss over `samples`, pixel-weighted across all of them.
    pub fn evaluate(&self, samples: &[PatchSample]) -> Result<f64> {
        evaluate_loss(&self.params, samples, self.config.l2_lambda, self.config.batch_size)
    }
}

/// Eval-mode masked loss of `samples` (pixel-weighted) plus the kernel penalty.
pub fn evaluate_loss(params: &ModelParams, samples: &[PatchSample], lambda: f64, chunk: usize) -> Result<f64> {
    let (mut sse, mut count) = (0.0, 0usize);
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&PatchSample> = part.iter().collect();
        let (inputs, label, mask) = batch_tensors(&refs)?;
        let pred = params.predict(&inputs)?;
        let (s, c) = masked_sse(&pred, &label, &mask)?;
        sse += s;
        count += c;
    }
    let mse = if count > 0 { sse / count as f64 } else { 0.0 };
    Ok(mse + lambda * params.store.kernel_sum_squares())
}

/// Trains with per-epoch seeded shuffling and early stopping; returns the
/// parameters of the epoch with the lowest validation loss.
pub fn train_model(
    params: ModelParams,
    train: &[PatchSample],
    val: &[PatchSample],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Insufficient("training and validation sets must be non-empty".into()));
    }
    let mut trainer = Trainer::new(params, config.clone())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        steps: 0,
        empty_batches: 0,
        stopped_early: false,
        wall_clock_seconds: Vec::new(),
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut trainer.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PatchSample> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = trainer.step(&batch).map_err(|e| match e {
                Error::NonFiniteLoss { step, loss, .. } => Error::NonFiniteLoss { epoch, step, loss },
                other => other,
            })?;
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_loss = trainer.evaluate(val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: trainer.steps,
                loss: val_loss,
            });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.wall_clock_seconds.push(start.elapsed().as_secs_f64());
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, trainer.params.store.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        progress(&EpochRecord {
            epoch,
            train_loss,
            val_loss,
            best_epoch: history.best_epoch,
            seconds: *history.wall_clock_seconds.last().unwrap(),
        });
        if since_best >= config.early_stop_patience {
            history.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    history.steps = trainer.steps;
    history.empty_batches = trainer.empty_batches;
    let mut params = trainer.params;
    if let Some((_, store)) = best {
        params.store = store;
    }
    Ok((params, history))
}

/// Labeled-pixel predictions for every sample, in eval mode.
pub fn predict_samples(params: &ModelParams, samples: &[PatchSample]) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| {
            let (inputs, _, _) = batch_tensors(&[s])?;
            params.predict(&inputs)
        })
        .collect()
}

/// Kinds under weight decay, for documentation and tests.
pub const DECAYED_KINDS: [ParamKind; 1] = [ParamKind::Kernel];
