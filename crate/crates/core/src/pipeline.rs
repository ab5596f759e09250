//! The two-stage Med-NCA procedure.
//!
//! Stage 1 rolls out `b1` on the image average-pooled by `scale_factor`.
//! Its state is upscaled back to full resolution and channel 0 is replaced
//! with the full-resolution image. Stage 2 rolls out `b2` on that state:
//! during training on one random patch the size of the downscaled image,
//! during inference on the whole image. Channel 1 holds the logit.

use rand::Rng;

use crate::engine::ops::{self, ResampleMode};
use crate::engine::{LiveMeter, Scalar, Tape, TapeMode, Tensor, Var};
use crate::nca::{self, init_params, BackboneParams, BackboneVars, NcaConfig, Origin};
use crate::par::{self, Execution};
use crate::{losses, rng, Error, Result};

/// Channel carrying the segmentation logit.
pub const LOGIT_CHANNEL: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MedNcaModel<S> {
    /// Low-resolution backbone.
    pub b1: BackboneParams<S>,
    /// High-resolution backbone.
    pub b2: BackboneParams<S>,
    pub config: NcaConfig,
    pub scale_factor: usize,
    /// How the stage-1 state is brought back to full resolution.
    pub upscale: ResampleMode,
}

impl<S: Scalar> MedNcaModel<S> {
    pub fn new(config: NcaConfig, scale_factor: usize, seed: u64) -> Result<Self> {
        let model = Self {
            b1: init_params(&config, rng::derive(seed, &[1])),
            b2: init_params(&config, rng::derive(seed, &[2])),
            config,
            scale_factor,
            upscale: ResampleMode::Nearest,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.scale_factor < 2 {
            return Err(Error::Config(format!("scale factor must be at least 2, got {}", self.scale_factor)));
        }
        let (n, h) = (self.config.n, self.config.h);
        for b in [&self.b1, &self.b2] {
            if b.n() != n || b.h() != h {
                return Err(Error::Config(format!("backbone is {}x{}, config says n={n}, h={h}", b.n(), b.h())));
            }
        }
        Ok(())
    }

    /// Trainable scalars of both backbones.
    pub fn param_count(&self) -> usize {
        self.b1.element_count() + self.b2.element_count()
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.b1.tensors().into_iter().chain(self.b2.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let (b1, b2) = (&mut self.b1, &mut self.b2);
        b1.tensors_mut().into_iter().chain(b2.tensors_mut()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> MedNcaModel<T> {
        MedNcaModel {
            b1: self.b1.cast(),
            b2: self.b2.cast(),
            config: self.config,
            scale_factor: self.scale_factor,
            upscale: self.upscale,
        }
    }
}

/// Image with its binary ground-truth mask, both `1 x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<S = f32> {
    pub image: Tensor<S>,
    pub mask: Tensor<S>,
}

impl<S: Scalar> TrainSample<S> {
    pub fn validate(&self, scale_factor: usize) -> Result<(usize, usize)> {
        let (c, h, w) = self.image.chw()?;
        if c != 1 || self.mask.shape() != self.image.shape() {
            return Err(Error::Shape(format!(
                "image {:?} and mask {:?} must both be 1 x H x W",
                self.image.shape(),
                self.mask.shape()
            )));
        }
        if self.mask.data().iter().any(|&v| v != S::zero() && v != S::one()) {
            return Err(Error::Invalid("mask is not binary".into()));
        }
        if h % scale_factor != 0 || w % scale_factor != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by the scale factor {scale_factor}")));
        }
        Ok((h, w))
    }

    pub fn cast<T: Scalar>(&self) -> TrainSample<T> {
        TrainSample { image: self.image.cast(), mask: self.mask.cast() }
    }
}

/// Channel 0 = image, all other channels zero.
pub fn seed_state<S: Scalar>(image: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    let (c, h, w) = image.chw()?;
    if c != 1 || n < 2 {
        return Err(Error::Shape(format!("seed_state: image {:?}, n = {n}", image.shape())));
    }
    let mut data = vec![S::zero(); n * h * w];
    data[..h * w].copy_from_slice(image.data());
    Ok(Tensor::from_vec(&[n, h, w], data)?)
}

/// Average-area pooling by an integer factor.
pub fn downsample<S: Scalar>(image: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (_, h, w) = image.chw()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {factor}")));
    }
    Ok(ops::resample(image, h / factor, w / factor, ResampleMode::AverageArea)?)
}

fn stage_seeds(seed: u64) -> (u64, u64) {
    (rng::derive(seed, &[1]), rng::derive(seed, &[2]))
}

/// Rollout of `b1` from the seed state of an already-downscaled image.
pub fn stage1<S: Scalar>(model: &MedNcaModel<S>, image_lo: &Tensor<S>, seed: u64) -> Result<Tensor<S>> {
    let cfg = &model.config;
    let state = seed_state(image_lo, cfg.n)?;
    nca::rollout(&state, &model.b1, cfg.steps, cfg.fire_rate, stage_seeds(seed).0)
}

/// Upscales every channel to the size of `image_hi`, then overwrites
/// channel 0 with `image_hi`.
pub fn lift_state<S: Scalar>(state_lo: &Tensor<S>, image_hi: &Tensor<S>, mode: ResampleMode) -> Result<Tensor<S>> {
    let (_, lh, lw) = state_lo.chw()?;
    let (ic, h, w) = image_hi.chw()?;
    if ic != 1 || h % lh != 0 || w % lw != 0 {
        return Err(Error::Shape(format!("cannot lift {lh}x{lw} state onto image {:?}", image_hi.shape())));
    }
    let mut up = ops::resample(state_lo, h, w, mode)?;
    up.channel_mut(0)?.copy_from_slice(image_hi.data());
    Ok(up)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    /// Foreground where `prob > threshold` (strict).
    pub threshold: f64,
    /// Overrides the configured fire rate, e.g. `Some(1.0)` for synchronous updates.
    pub fire_rate: Option<f64>,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { threshold: 0.5, fire_rate: None }
    }
}

#[derive(Debug, Clone)]
pub struct Inference<S> {
    /// Binary `1 x H x W` mask.
    pub mask: Tensor<S>,
    /// Foreground probability, `1 x H x W`.
    pub prob: Tensor<S>,
    /// Peak live activation scalars during the run.
    pub peak_live: usize,
}

/// Full-image inference; no patches. Sizes that are not multiples of the
/// scale factor are reflect-padded and the result is cropped back.
pub fn infer<S: Scalar>(
    model: &MedNcaModel<S>,
    image: &Tensor<S>,
    seed: u64,
    opts: InferOptions,
) -> Result<Inference<S>> {
    let (c, h, w) = image.chw()?;
    let f = model.scale_factor;
    if c != 1 {
        return Err(Error::Shape(format!("expected a 1 x H x W image, got {:?}", image.shape())));
    }
    if h < 2 * f || w < 2 * f {
        return Err(Error::Shape(format!("image {h}x{w} is smaller than {0}x{0}", 2 * f)));
    }
    let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    let mut meter = LiveMeter::new();
    let padded;
    let image = if (ph, pw) != (h, w) {
        padded = ops::pad_reflect(image, ph - h, pw - w)?;
        meter.alloc(padded.len());
        &padded
    } else {
        image
    };
    let cfg = &model.config;
    let fire_rate = opts.fire_rate.unwrap_or(cfg.fire_rate);
    let (seed1, seed2) = stage_seeds(seed);

    let lo = downsample(image, f)?;
    meter.alloc(lo.len());
    let s0 = seed_state(&lo, cfg.n)?;
    meter.alloc(s0.len());
    let s1 = nca::rollout_metered(&s0, &model.b1, 0..cfg.steps, fire_rate, seed1, Origin::default(), &mut meter)?;
    meter.free(s0.len() + lo.len());
    drop(s0);

    let lifted = lift_state(&s1, image, model.upscale)?;
    meter.alloc(lifted.len());
    meter.free(s1.len());
    drop(s1);
    let s2 = nca::rollout_metered(&lifted, &model.b2, 0..cfg.steps, fire_rate, seed2, Origin::default(), &mut meter)?;
    meter.free(lifted.len());
    drop(lifted);

    let logits = s2.channel(LOGIT_CHANNEL)?;
    let threshold = S::from_f64(opts.threshold);
    let mut prob = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    meter.alloc(2 * h * w);
    for y in 0..h {
        for x in 0..w {
            let p = ops::sigmoid_scalar(logits[y * pw + x]);
            prob.push(p);
            mask.push(if p > threshold { S::one() } else { S::zero() });
        }
    }
    Ok(Inference {
        mask: Tensor::from_vec(&[1, h, w], mask)?,
        prob: Tensor::from_vec(&[1, h, w], prob)?,
        peak_live: meter.peak(),
    })
}

/// Records the training forward pass of one sample and returns the loss
/// var (`dice + bce` on the stage-2 patch).
fn record_sample<S: Scalar>(
    tape: &mut Tape<S>,
    model: &MedNcaModel<S>,
    vars: (&BackboneVars, &BackboneVars),
    sample: &TrainSample<S>,
    seed: u64,
) -> Result<Var> {
    let (h, w) = sample.validate(model.scale_factor)?;
    let f = model.scale_factor;
    let (ph, pw) = (h / f, w / f);
    let cfg = &model.config;
    let (seed1, seed2) = stage_seeds(seed);

    let lo = downsample(&sample.image, f)?;
    let s0 = tape.constant(seed_state(&lo, cfg.n)?);
    let s1 = nca::rollout_taped(tape, s0, vars.0, cfg.steps, cfg.fire_rate, seed1, Origin::default())?;

    let mut prng = rng::chacha(seed, &[3]);
    let py = prng.random_range(0..=h - ph);
    let px = prng.random_range(0..=w - pw);
    let up = tape.resample(s1, h, w, model.upscale)?;
    let patch = tape.crop(up, py, px, ph, pw)?;
    let image_patch = ops::crop(&sample.image, py, px, ph, pw)?;
    let lifted = tape.replace_channel(patch, 0, &image_patch)?;
    tape.release(&[lifted]);

    let origin = Origin { y: py, x: px };
    let s2 = nca::rollout_taped(tape, lifted, vars.1, cfg.steps, cfg.fire_rate, seed2, origin)?;
    let logit = tape.select_channel(s2, LOGIT_CHANNEL)?;
    let prob = tape.sigmoid(logit)?;
    let target = tape.constant(ops::crop(&sample.mask, py, px, ph, pw)?);
    let dice = tape.dice_loss(prob, target, S::from_f64(losses::DICE_EPS))?;
    let bce = tape.bce_loss(prob, target)?;
    Ok(tape.add(dice, bce)?)
}

/// Mean batch loss and its gradients for `b1` and `b2`.
#[derive(Debug, Clone)]
pub struct StepOutput<S> {
    pub loss: f64,
    pub grads: [BackboneParams<S>; 2],
}

/// Loss and gradients of one sample (unscaled).
pub fn sample_gradients<S: Scalar>(
    model: &MedNcaModel<S>,
    sample: &TrainSample<S>,
    seed: u64,
) -> Result<StepOutput<S>> {
    let mut tape = Tape::new();
    let v1 = BackboneVars::register(&mut tape, &model.b1);
    let v2 = BackboneVars::register(&mut tape, &model.b2);
    let loss = record_sample(&mut tape, model, (&v1, &v2), sample, seed)?;
    let value = tape.value(loss)?.item()?.to_f64();
    let mut grads = tape.backward(loss)?;
    Ok(StepOutput { loss: value, grads: [v1.take_grads(&mut grads)?, v2.take_grads(&mut grads)?] })
}

/// One training step over a batch. Each sample draws its patch and fire
/// masks from `(seed, index)`; gradients are reduced in index order, so
/// the result does not depend on `exec`.
pub fn train_step_with<S: Scalar>(
    exec: Execution,
    model: &MedNcaModel<S>,
    batch: &[TrainSample<S>],
    seed: u64,
) -> Result<StepOutput<S>> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let outputs = par::map_indexed(exec, batch.len(), |i| {
        sample_gradients(model, &batch[i], rng::derive(seed, &[0xba7c, i as u64]))
    });
    let mut total: Option<StepOutput<S>> = None;
    for out in outputs {
        let out = out?;
        match &mut total {
            None => total = Some(out),
            Some(acc) => {
                acc.loss += out.loss;
                for (a, g) in acc.grads.iter_mut().zip(&out.grads) {
                    for (ta, tg) in a.tensors_mut().into_iter().zip(g.tensors()) {
                        ta.add_assign(tg)?;
                    }
                }
            }
        }
    }
    let mut total = total.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f64;
    total.loss *= inv;
    for g in &mut total.grads {
        for t in g.tensors_mut() {
            t.scale(S::from_f64(inv));
        }
    }
    Ok(total)
}

pub fn train_step<S: Scalar>(model: &MedNcaModel<S>, batch: &[TrainSample<S>], seed: u64) -> Result<StepOutput<S>> {
    train_step_with(Execution::default(), model, batch, seed)
}

/// Activation scalars a training step on one `h x w` sample keeps for backward.
pub fn training_activation_scalars(model: &MedNcaModel<f32>, h: usize, w: usize) -> Result<usize> {
    let mut tape = Tape::with_mode(TapeMode::Accounting);
    let v1 = BackboneVars::register(&mut tape, &model.b1);
    let v2 = BackboneVars::register(&mut tape, &model.b2);
    let sample = TrainSample { image: Tensor::zeros(&[1, h, w]), mask: Tensor::zeros(&[1, h, w]) };
    record_sample(&mut tape, model, (&v1, &v2), &sample, 0)?;
    Ok(tape.saved_scalars())
}

/// The same count for a single-stage model trained directly on the full
/// `h x w` image with `2 * steps` steps (what is needed for a comparable
/// perceptive range without the downscaled stage).
pub fn naive_training_activation_scalars(model: &MedNcaModel<f32>, h: usize, w: usize) -> Result<usize> {
    let cfg = &model.config;
    let mut tape = Tape::with_mode(TapeMode::Accounting);
    let vars = BackboneVars::register(&mut tape, &model.b1);
    let s0 = tape.constant(seed_state(&Tensor::zeros(&[1, h, w]), cfg.n)?);
    let s = nca::rollout_taped(&mut tape, s0, &vars, 2 * cfg.steps, cfg.fire_rate, 0, Origin::default())?;
    let logit = tape.select_channel(s, LOGIT_CHANNEL)?;
    let prob = tape.sigmoid(logit)?;
    let target = tape.constant(Tensor::zeros(&[1, h, w]));
    let dice = tape.dice_loss(prob, target, losses::DICE_EPS as f32)?;
    let bce = tape.bce_loss(prob, target)?;
    tape.add(dice, bce)?;
    Ok(tape.saved_scalars())
}

/// Peak live activation scalars of [`infer`] on an `h x w` image.
pub fn inference_peak_live(model: &MedNcaModel<f32>, h: usize, w: usize) -> Result<usize> {
    let image = Tensor::zeros(&[1, h, w]);
    Ok(infer(model, &image, 0, InferOptions::default())?.peak_live)
}
