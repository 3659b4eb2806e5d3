//! AdamW training with linear warm-up and linear decay.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::FidModel;
use super::params::Params;
use super::tokenizer::InputSequence;
use super::{real, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Linear warm-up to the peak rate, then linear decay to zero at `total_steps`.
    Linear,
    /// Linear warm-up, then constant.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            warmup_steps: 2000,
            total_steps: 20_000,
            schedule: Schedule::Linear,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 1,
            seed: 0,
        }
    }
}

/// Learning rate at 1-based `step`.
pub fn learning_rate(cfg: &OptimizerConfig, step: usize) -> f64 {
    if step <= cfg.warmup_steps {
        return cfg.learning_rate * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.learning_rate,
        Schedule::Linear => {
            let span = cfg.total_steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
            let left = cfg.total_steps.saturating_sub(step) as f64;
            cfg.learning_rate * (left / span).max(0.0)
        }
    }
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only, not to
/// layer-norm gains or biases.
#[derive(Debug, Clone)]
pub struct AdamW<R> {
    first: Params<R>,
    second: Params<R>,
    steps: i32,
}

impl<R: Real> AdamW<R> {
    pub fn new(params: &Params<R>) -> Self {
        AdamW {
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut Params<R>,
        grad: &Params<R>,
        lr: f64,
        cfg: &OptimizerConfig,
    ) {
        self.steps += 1;
        let b1 = real::<R>(cfg.beta1);
        let b2 = real::<R>(cfg.beta2);
        let one = R::one();
        let c1 = one - b1.powi(self.steps);
        let c2 = one - b2.powi(self.steps);
        let lr = real::<R>(lr);
        let eps = real::<R>(cfg.eps);
        let wd = real::<R>(cfg.weight_decay);
        let shapes: Vec<usize> = params.named().iter().map(|(_, s, _)| s.len()).collect();
        let grads = grad.named();
        let tensors = params
            .named_mut()
            .into_iter()
            .zip(self.first.named_mut())
            .zip(self.second.named_mut())
            .zip(grads)
            .zip(shapes);
        for (((((_, p), (_, m)), (_, v)), (_, _, g)), ndim) in tensors {
            let decay = if ndim == 2 { wd } else { R::zero() };
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] -= lr * (update + decay * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    /// One encoder input per passage.
    pub inputs: Vec<InputSequence>,
    /// Answer ids followed by EOS.
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean batch loss at every optimization step.
    pub losses: Vec<f64>,
}

fn global_norm<R: Real>(grad: &Params<R>) -> f64 {
    grad.named()
        .iter()
        .flat_map(|(_, _, t)| t.iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Runs `cfg.total_steps` optimization steps. Examples are visited in a
/// fresh seeded permutation every epoch.
pub fn train<R: Real>(
    model: &mut FidModel<R>,
    data: &[TrainExample],
    cfg: &OptimizerConfig,
) -> Result<TrainReport> {
    if cfg.total_steps > 0 && data.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = AdamW::new(model.params());
    let mut report = TrainReport::default();
    let inv_batch = real::<R>(1.0 / cfg.batch_size as f64);

    for step in 1..=cfg.total_steps {
        let mut grad: Option<Params<R>> = None;
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &data[order[cursor]];
            cursor += 1;
            let (l, g) = model.loss_and_gradient(&ex.inputs, &ex.target)?;
            loss += l.to_f64().unwrap() / cfg.batch_size as f64;
            match grad.as_mut() {
                None => {
                    let mut g = g;
                    if cfg.batch_size > 1 {
                        for (_, t) in g.named_mut() {
                            t.iter_mut().for_each(|v| *v *= inv_batch);
                        }
                    }
                    grad = Some(g);
                }
                Some(acc) => acc.add_scaled(&g, inv_batch),
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut grad = grad.expect("batch_size > 0");
        if cfg.clip_norm > 0.0 {
            let norm = global_norm(&grad);
            if norm > cfg.clip_norm {
                let scale = real::<R>(cfg.clip_norm / norm);
                for (_, t) in grad.named_mut() {
                    t.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        let lr = learning_rate(cfg, step);
        opt.step(model.params_mut(), &grad, lr, cfg);
        report.losses.push(loss);
        if step % 100 == 0 {
            debug!("step {step}: loss {loss:.4} lr {lr:.2e}");
        }
    }
    Ok(report)
}
