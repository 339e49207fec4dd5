//! Adam with per-step cosine annealing, and the shared minibatch loop used
//! by both the linear probe and the fusion models.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Parameters are rounded to `f32` after every update.
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            epochs: 40,
            batch_size: 128,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("lr0 must be a finite non-negative number, got {}", self.lr0)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`, clamped at zero past `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let frac = step as f64 / total as f64;
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// A differentiable training objective over a flat parameter vector.
pub trait Objective: Sync {
    fn samples(&self) -> usize;
    fn num_params(&self) -> usize;
    /// Mean loss over `rows`; writes d(loss)/d(params) into `grad`.
    fn loss_grad(&self, params: &[f64], rows: &[usize], grad: &mut [f64]) -> f64;

    fn full_loss_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let rows: Vec<usize> = (0..self.samples()).collect();
        let mut grad = vec![0.0; self.num_params()];
        let loss = self.loss_grad(params, &rows, &mut grad);
        (loss, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossLog {
    /// Mean per-sample training loss of each epoch, accumulated over its minibatches.
    pub losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

fn round_single(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

/// Seeded shuffled minibatch Adam with cosine annealing. The last partial
/// batch of each epoch is kept.
pub fn train<O: Objective + ?Sized>(objective: &O, mut params: Vec<f64>, cfg: &TrainConfig) -> Result<(Vec<f64>, LossLog)> {
    cfg.validate()?;
    let n = objective.samples();
    if n == 0 {
        return Err(Error::invalid("empty training set"));
    }
    if params.len() != objective.num_params() {
        return Err(Error::shape(format!(
            "{} initial parameters for an objective with {}",
            params.len(),
            objective.num_params()
        )));
    }
    if cfg.precision == Precision::Single {
        round_single(&mut params);
    }

    let total_steps = cfg.epochs * cfg.steps_per_epoch(n);
    let mut adam = Adam::new(params.len(), cfg);
    let mut grad = vec![0.0; params.len()];
    let mut log = LossLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng::keyed(rng::domain::PROBE_SHUFFLE, cfg.seed, &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = objective.loss_grad(&params, batch, &mut grad);
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            epoch_loss += loss * batch.len() as f64;
            let lr = cosine_lr(cfg.lr0, step, total_steps);
            adam.step(&mut params, &grad, lr);
            if cfg.precision == Precision::Single {
                round_single(&mut params);
            }
            step += 1;
        }
        log.losses.push(epoch_loss / n as f64);
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok((params, log))
}
