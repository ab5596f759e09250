//! Optimisation loop: Adam, step-decay schedule, gradient clipping,
//! best-on-validation selection with early stopping, and history telemetry.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::engine::{EngineError, Scalar, Tensor};
use crate::par::{self, Execution};
use crate::pipeline::{self, InferOptions, MedNcaModel, TrainSample};
use crate::{losses, rng, Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS_OPT: f64 = 1e-8;

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<S> {
    pub step_count: u64,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &[&Tensor<S>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps_opt: EPS_OPT,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    opt: &mut OptimState<S>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.first_moment.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            opt.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&opt.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "adam: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = opt.first_moment[i].data_mut();
        let v = opt.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            let g = Scalar::to_f64(gv);
            let m_new = b1 * Scalar::to_f64(*mv) + (1.0 - b1) * g;
            let v_new = b2 * Scalar::to_f64(*vv) + (1.0 - b2) * g * g;
            *mv = S::from_f64(m_new);
            *vv = S::from_f64(v_new);
            let m_hat = m_new / c1;
            let v_hat = v_new / c2;
            *pv = S::from_f64(Scalar::to_f64(*pv) - opt.lr * m_hat / (v_hat.sqrt() + opt.eps_opt));
        }
    }
    Ok(())
}

/// Scale `grads` so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [&mut Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|&v| Scalar::to_f64(v).powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale(k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied every quarter of `epochs`.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without a new best validation Dice before stopping.
    pub patience: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after the first epoch that ends past this many seconds.
    pub max_wall_secs: Option<f64>,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 0.5,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            patience: 30,
            clip_norm: Some(1.0),
            max_wall_secs: None,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} outside (0, 1]", self.lr_decay)));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let period = (self.epochs / 4).max(1);
        self.lr * self.lr_decay.powi((epoch / period) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_dice,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_dice, r.lr);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
    TimeBudget,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters at the best validation epoch (the initial model if no epoch ran).
    pub best: MedNcaModel<f32>,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Dice of thresholded full-image inference for each sample. Image `i`
/// uses inference seed `derive(seed, [i])`.
pub fn dice_per_image(
    exec: Execution,
    model: &MedNcaModel<f32>,
    samples: &[TrainSample<f32>],
    seed: u64,
) -> Result<Vec<f64>> {
    par::map_indexed(exec, samples.len(), |i| {
        let s = &samples[i];
        let out = pipeline::infer(model, &s.image, rng::derive(seed, &[i as u64]), InferOptions::default())?;
        losses::dice_score(&out.mask, &s.mask)
    })
    .into_iter()
    .collect()
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Engine(EngineError::NonFinite { op }) => {
            Error::Diverged { epoch, detail: format!("non-finite value in {op}") }
        }
        other => other,
    }
}

/// Train `model` and return the parameters with the best validation Dice.
pub fn fit(
    model: MedNcaModel<f32>,
    train: &[TrainSample<f32>],
    val: &[TrainSample<f32>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    model.validate()?;
    if cfg.epochs == 0 {
        return Ok(FitResult {
            best: model,
            best_epoch: None,
            best_val_dice: None,
            history: Vec::new(),
            stop: StopReason::Completed,
        });
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    for s in train.iter().chain(val) {
        s.validate(model.scale_factor)?;
    }

    let started = Instant::now();
    let mut model = model;
    let mut opt = OptimState::new(&model.tensors(), cfg.lr);
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_dice = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = StopReason::Completed;

    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng::chacha(cfg.seed, &[0x5eed, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainSample<f32>> = idx.iter().map(|&i| train[i].clone()).collect();
            let step_seed = rng::derive(cfg.seed, &[epoch as u64, b as u64]);
            let mut out =
                pipeline::train_step_with(cfg.exec, &model, &batch, step_seed).map_err(|e| diverged(epoch, e))?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("loss is {}", out.loss) });
            }
            let [g1, g2] = &mut out.grads;
            let mut grads: Vec<&mut Tensor<f32>> = g1.tensors_mut().into_iter().chain(g2.tensors_mut()).collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, detail: "non-finite gradient".into() });
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            let grads: Vec<&Tensor<f32>> = grads.into_iter().map(|g| &*g).collect();
            adam_step(&mut model.tensors_mut(), &grads, &mut opt)?;
            loss_sum += out.loss;
            batches += 1;
        }
        let dice = dice_per_image(cfg.exec, &model, val, cfg.seed).map_err(|e| diverged(epoch, e))?;
        let val_dice = losses::mean_std(&dice).0;
        let record = EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_dice, lr: opt.lr };
        on_epoch(&record);
        history.push(record);

        if val_dice > best_dice {
            best_dice = val_dice;
            best_epoch = Some(epoch);
            best = model.clone();
        } else if epoch - best_epoch.unwrap_or(0) >= cfg.patience {
            stop = StopReason::EarlyStopped;
            break;
        }
        if cfg.max_wall_secs.is_some_and(|t| started.elapsed().as_secs_f64() > t) {
            stop = StopReason::TimeBudget;
            break;
        }
    }
    Ok(FitResult { best, best_epoch, best_val_dice: best_epoch.map(|_| best_dice), history, stop })
}
