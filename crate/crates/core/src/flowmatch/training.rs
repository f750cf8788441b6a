//! Flow-matching training loop shared by text-conditioned pretraining and
//! speech-conditioned fine-tuning.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::VelocityNet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::scalar;
use crate::rng::{derive_seed_str, normal_vec, seeded, SeededRng};
use crate::train::{adamw, ensure_finite, length_batches, length_groups, Optimizer, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Decay of the weight moving average that is validated and kept;
    /// 0 keeps the raw weights.
    pub ema_decay: f64,
    /// Cosine decay of the learning rate to `MIN_LR_FACTOR * lr`.
    pub cosine_decay: bool,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 0.0,
            ema_decay: 0.999,
            cosine_decay: true,
        }
    }
}

pub const MIN_LR_FACTOR: f64 = 0.1;

/// Learning rate after `step` of `total` updates.
pub fn scheduled_lr(cfg: &FlowTrainConfig, step: usize, total: usize) -> f64 {
    if !cfg.cosine_decay || total == 0 {
        return cfg.lr;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * (MIN_LR_FACTOR + (1.0 - MIN_LR_FACTOR) * cos)
}

/// Exponential moving average of a parameter store, with the decay ramped
/// up as `(1 + t) / (10 + t)` over the first updates.
struct Ema {
    decay: f64,
    updates: usize,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    fn new(net: &VelocityNet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema_decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            decay,
            updates: 0,
            shadow: net.store().snapshot()?,
        })
    }

    fn update(&mut self, net: &VelocityNet) -> Result<()> {
        let t = self.updates as f64;
        let d = self.decay.min((1.0 + t) / (10.0 + t));
        self.updates += 1;
        for (name, var) in net.store().named_vars() {
            let old = &self.shadow[name];
            let new = ((old * d)? + (var.as_tensor().detach() * (1.0 - d))?)?;
            self.shadow.insert(name.clone(), new);
        }
        Ok(())
    }

    /// Runs `f` with the averaged weights loaded, then puts the raw ones back.
    fn with_average<T>(&self, net: &VelocityNet, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let raw = net.store().snapshot()?;
        net.store().restore(&self.shadow)?;
        let out = f();
        net.store().restore(&raw)?;
        out
    }
}

/// One training pair in the generator's (standardized) latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowExample {
    pub z_mu: Matrix,
    pub z_sigma: Matrix,
    /// Conditioning tokens `N x C`.
    pub cond: Matrix,
}

fn stack(ms: &[&Matrix], dtype: DType) -> Result<Tensor> {
    let (r, c) = (ms[0].rows, ms[0].cols);
    let data: Vec<f32> = ms.iter().flat_map(|m| m.data.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (ms.len(), r, c), &Device::Cpu)?.to_dtype(dtype)?)
}

fn randn(rng: &mut SeededRng, shape: (usize, usize, usize), dtype: DType) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    Ok(Tensor::from_vec(normal_vec(rng, n), shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Flow-matching loss of one batch. `drop` marks items whose conditioning is
/// replaced by the null embedding.
fn batch_loss(net: &VelocityNet, items: &[&FlowExample], drop: &[bool], rng: &mut SeededRng) -> Result<Tensor> {
    let dtype = net.dtype();
    let b = items.len();
    let mu = stack(&items.iter().map(|e| &e.z_mu).collect::<Vec<_>>(), dtype)?;
    let sigma = stack(&items.iter().map(|e| &e.z_sigma).collect::<Vec<_>>(), dtype)?;
    let shape = mu.dims3()?;
    let z0 = (&mu + sigma.mul(&randn(rng, shape, dtype)?)?)?;
    let z1 = randn(rng, shape, dtype)?;
    let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
    let tt = Tensor::from_vec(t.clone(), (b, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let zt = (z0.broadcast_mul(&(1.0 - &tt)?)? + z1.broadcast_mul(&tt)?)?;
    let mut cond = stack(&items.iter().map(|e| &e.cond).collect::<Vec<_>>(), dtype)?;
    if drop.iter().any(|&d| d) {
        let n = cond.dim(1)?;
        let m: Vec<f32> = drop.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
        let m = Tensor::from_vec(m, (b, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let null = net.null_batch(b, n)?;
        cond = (cond.broadcast_mul(&(1.0 - &m)?)? + null.broadcast_mul(&m)?)?;
    }
    let v = net.forward(&zt, &t, &cond)?;
    Ok((v - (z1 - z0)?)?.sqr()?.mean_all()?)
}

fn group_key(e: &FlowExample) -> usize {
    e.z_mu.rows * 1_000_003 + e.cond.rows
}

/// Mean validation loss with a fixed seed and no conditioning dropout.
fn validation_loss(net: &VelocityNet, val: &[FlowExample], seed: u64) -> Result<f64> {
    let mut rng = seeded(derive_seed_str(seed, "flow-val"));
    let keys: Vec<usize> = val.iter().map(group_key).collect();
    let (mut total, mut n) = (0.0, 0usize);
    for g in length_groups(&keys, 64) {
        let items: Vec<&FlowExample> = g.iter().map(|&i| &val[i]).collect();
        let l = scalar(&batch_loss(net, &items, &vec![false; items.len()], &mut rng)?)?;
        total += l * items.len() as f64;
        n += items.len();
    }
    Ok(total / n as f64)
}

/// Trains `net` in place and keeps the (averaged) weights with the lowest
/// validation loss.
pub fn train_flow(
    net: &VelocityNet,
    train: &[FlowExample],
    val: &[FlowExample],
    cfg: &FlowTrainConfig,
    seed: u64,
    what: &'static str,
) -> Result<TrainLog> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!("{what}: empty training or validation set")));
    }
    let mut opt = adamw(net.store().vars(), scheduled_lr(cfg, 0, 1), cfg.weight_decay)?;
    let mut ema = Ema::new(net, cfg.ema_decay)?;
    let mut rng = seeded(derive_seed_str(seed, "flow-train"));
    let keys: Vec<usize> = train.iter().map(group_key).collect();
    let p = net.config.cond_drop_prob;
    let mut log = TrainLog {
        initial_val: Some(validation_loss(net, val, seed)?),
        ..TrainLog::default()
    };
    let mut best = (f64::INFINITY, net.store().snapshot()?);
    let total_steps = cfg.epochs * length_groups(&keys, cfg.batch_size).len();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut total, mut n) = (0.0, 0usize);
        for batch in length_batches(&keys, cfg.batch_size, &mut rng) {
            let items: Vec<&FlowExample> = batch.iter().map(|&i| &train[i]).collect();
            let drop: Vec<bool> = items.iter().map(|_| rng.random_bool(p)).collect();
            let loss = batch_loss(net, &items, &drop, &mut rng)?;
            let v = scalar(&loss)?;
            ensure_finite(v, what, epoch)?;
            opt.set_learning_rate(scheduled_lr(cfg, step, total_steps));
            opt.backward_step(&loss)?;
            ema.update(net)?;
            step += 1;
            total += v * items.len() as f64;
            n += items.len();
        }
        let v = ema.with_average(net, || validation_loss(net, val, seed))?;
        ensure_finite(v, what, epoch)?;
        log.train_loss.push(total / n as f64);
        log.val_metric.push(v);
        if v < best.0 {
            best = (v, ema.shadow.clone());
            log.best_epoch = epoch;
        }
        log::debug!("{what} epoch {epoch}: train {:.4} val {v:.4}", total / n as f64);
    }
    log.epochs_run = cfg.epochs;
    net.store().restore(&best.1)?;
    Ok(log)
}
