//! One backbone NCA: parameters, initialisation, the asynchronous update
//! step and multi-step rollout, both as plain inference code and recorded
//! on a [`Tape`] for training.
//!
//! A step perceives the state with two parallel reflect-padded 3x3 convs,
//! concatenates `[state, p1, p2]` into a `3n` vector per cell, maps it
//! through `dense(3n -> h) -> ReLU -> dense(h -> n, no bias)` and adds the
//! result to the state on the cells selected by the fire mask.

use rand::Rng;

use crate::engine::ops::{self, im2col_reflect};
use crate::engine::{Gradients, LiveMeter, Scalar, Tape, Tensor, Var};
use crate::{rng, Error, Result};

/// Hyperparameters of a backbone NCA.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcaConfig {
    /// State channels per cell.
    pub n: usize,
    /// Hidden width of the per-cell MLP.
    pub h: usize,
    /// Leading channels holding image data.
    pub img_channels: usize,
    /// Per-cell, per-step update probability.
    pub fire_rate: f64,
    /// Rollout length of each stage.
    pub steps: usize,
}

impl Default for NcaConfig {
    fn default() -> Self {
        Self { n: 32, h: 128, img_channels: 1, fire_rate: 0.5, steps: 32 }
    }
}

impl NcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n <= self.img_channels + 1 {
            return Err(Error::Config(format!(
                "n = {} leaves no hidden channel after {} image channel(s) and the logit",
                self.n, self.img_channels
            )));
        }
        if self.h == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        if !(self.fire_rate > 0.0 && self.fire_rate <= 1.0) {
            return Err(Error::Config(format!("fire rate {} outside (0, 1]", self.fire_rate)));
        }
        Ok(())
    }
}

/// Trainable parameters of one backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<S> {
    /// `n x n x 3 x 3`
    pub conv1_w: Tensor<S>,
    pub conv1_b: Tensor<S>,
    /// `n x n x 3 x 3`
    pub conv2_w: Tensor<S>,
    pub conv2_b: Tensor<S>,
    /// `h x 3n`
    pub dense1_w: Tensor<S>,
    pub dense1_b: Tensor<S>,
    /// `n x h`, no bias.
    pub dense2_w: Tensor<S>,
}

/// Scalars in one backbone with `n` channels and hidden width `h`.
pub fn param_count(n: usize, h: usize) -> usize {
    2 * (9 * n * n + n) + (3 * n * h + h) + h * n
}

impl<S: Scalar> BackboneParams<S> {
    pub fn zeros(n: usize, h: usize) -> Self {
        Self {
            conv1_w: Tensor::zeros(&[n, n, 3, 3]),
            conv1_b: Tensor::zeros(&[n]),
            conv2_w: Tensor::zeros(&[n, n, 3, 3]),
            conv2_b: Tensor::zeros(&[n]),
            dense1_w: Tensor::zeros(&[h, 3 * n]),
            dense1_b: Tensor::zeros(&[h]),
            dense2_w: Tensor::zeros(&[n, h]),
        }
    }

    pub fn n(&self) -> usize {
        self.conv1_b.len()
    }

    pub fn h(&self) -> usize {
        self.dense1_b.len()
    }

    /// Tensors in serialization order.
    pub fn tensors(&self) -> [&Tensor<S>; 7] {
        [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b, &self.dense1_w, &self.dense1_b, &self.dense2_w]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<S>; 7] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.dense1_w,
            &mut self.dense1_b,
            &mut self.dense2_w,
        ]
    }

    pub fn element_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> BackboneParams<T> {
        BackboneParams {
            conv1_w: self.conv1_w.cast(),
            conv1_b: self.conv1_b.cast(),
            conv2_w: self.conv2_w.cast(),
            conv2_b: self.conv2_b.cast(),
            dense1_w: self.dense1_w.cast(),
            dense1_b: self.dense1_b.cast(),
            dense2_w: self.dense2_w.cast(),
        }
    }

    fn check_state(&self, n: usize) -> Result<()> {
        if n != self.n() {
            return Err(Error::Shape(format!("state has {n} channels, backbone expects {}", self.n())));
        }
        Ok(())
    }
}

/// Uniform `[-a, a]`, `a = sqrt(1 / fan_in)` for the convolutions and the
/// first dense layer; the output layer starts at zero so a fresh backbone
/// is the identity map.
pub fn init_params<S: Scalar>(config: &NcaConfig, seed: u64) -> BackboneParams<S> {
    let (n, h) = (config.n, config.h);
    let mut p = BackboneParams::zeros(n, h);
    let mut rng = rng::chacha(seed, &[0x1417]);
    let mut fill = |t: &mut Tensor<S>, fan_in: usize| {
        let a = (1.0 / fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = S::from_f64(rng.random_range(-a..=a));
        }
    };
    fill(&mut p.conv1_w, 9 * n);
    fill(&mut p.conv1_b, 9 * n);
    fill(&mut p.conv2_w, 9 * n);
    fill(&mut p.conv2_b, 9 * n);
    fill(&mut p.dense1_w, 3 * n);
    fill(&mut p.dense1_b, 3 * n);
    p
}

/// Where a rollout sits inside a larger canvas; fire-mask draws are keyed
/// by canvas coordinates so a patch sees the same draws as the full image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Origin {
    pub y: usize,
    pub x: usize,
}

/// Per-cell Bernoulli(`fire_rate`) mask, one draw per `(seed, step, y, x)`.
pub fn fire_mask<S: Scalar>(fire_rate: f64, seed: u64, step: usize, origin: Origin, h: usize, w: usize) -> Vec<S> {
    if fire_rate >= 1.0 {
        return vec![S::one(); h * w];
    }
    let base = rng::derive(seed, &[step as u64]);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let cell = (((origin.y + y) as u64) << 32) | (origin.x + x) as u64;
            let u = rng::unit(rng::mix64(base ^ rng::mix64(cell)));
            mask.push(if u < fire_rate { S::one() } else { S::zero() });
        }
    }
    mask
}

/// One asynchronous update of `state` (`n x H x W`).
pub fn nca_step<S: Scalar>(
    state: &Tensor<S>,
    params: &BackboneParams<S>,
    fire_rate: f64,
    seed: u64,
    step_index: usize,
) -> Result<Tensor<S>> {
    let (_, h, w) = state.chw()?;
    let mask = fire_mask(fire_rate, seed, step_index, Origin::default(), h, w);
    step_plain(state, params, &mask, &mut LiveMeter::new())
}

/// `steps` sequential updates with step indices `0..steps`.
pub fn rollout<S: Scalar>(
    state: &Tensor<S>,
    params: &BackboneParams<S>,
    steps: usize,
    fire_rate: f64,
    seed: u64,
) -> Result<Tensor<S>> {
    rollout_metered(state, params, 0..steps, fire_rate, seed, Origin::default(), &mut LiveMeter::new())
}

/// Rollout over explicit step indices, recording live scalars in `meter`.
/// The caller accounts for the input state; the returned state stays
/// allocated in the meter.
pub fn rollout_metered<S: Scalar>(
    state: &Tensor<S>,
    params: &BackboneParams<S>,
    steps: std::ops::Range<usize>,
    fire_rate: f64,
    seed: u64,
    origin: Origin,
    meter: &mut LiveMeter,
) -> Result<Tensor<S>> {
    let (n, h, w) = state.chw()?;
    params.check_state(n)?;
    let mut current = state.clone();
    meter.alloc(current.len());
    for step in steps {
        meter.alloc(h * w);
        let mask = fire_mask(fire_rate, seed, step, origin, h, w);
        let next = step_plain(&current, params, &mask, meter)?;
        meter.free(h * w);
        meter.free(current.len());
        current = next;
    }
    Ok(current)
}

/// Fused inference step: one im2col feeds both perception convs, which write
/// straight into the `3n` perception vector.
fn step_plain<S: Scalar>(
    state: &Tensor<S>,
    p: &BackboneParams<S>,
    mask: &[S],
    meter: &mut LiveMeter,
) -> Result<Tensor<S>> {
    let (n, h, w) = state.chw()?;
    p.check_state(n)?;
    let hidden = p.h();
    let hw = h * w;
    if mask.iter().all(|&m| m == S::zero()) {
        meter.alloc(state.len());
        return Ok(state.clone());
    }

    let cols = im2col_reflect(state.data(), n, h, w);
    meter.alloc(cols.len());
    let mut z = vec![S::zero(); 3 * n * hw];
    meter.alloc(z.len());
    z[..n * hw].copy_from_slice(state.data());
    for (slot, (wt, b)) in [(&p.conv1_w, &p.conv1_b), (&p.conv2_w, &p.conv2_b)].into_iter().enumerate() {
        let out = &mut z[(slot + 1) * n * hw..(slot + 2) * n * hw];
        S::gemm(
            n,
            9 * n,
            hw,
            S::one(),
            wt.data(),
            (9 * n) as isize,
            1,
            &cols,
            hw as isize,
            1,
            S::zero(),
            out,
            hw as isize,
            1,
        );
        for (plane, &bv) in out.chunks_mut(hw).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    meter.free(cols.len());
    drop(cols);

    let mut a = vec![S::zero(); hidden * hw];
    meter.alloc(a.len());
    S::gemm(
        hidden,
        3 * n,
        hw,
        S::one(),
        p.dense1_w.data(),
        (3 * n) as isize,
        1,
        &z,
        hw as isize,
        1,
        S::zero(),
        &mut a,
        hw as isize,
        1,
    );
    for (plane, &bv) in a.chunks_mut(hw).zip(p.dense1_b.data()) {
        plane.iter_mut().for_each(|v| {
            *v += bv;
            if *v < S::zero() {
                *v = S::zero();
            }
        });
    }
    meter.free(z.len());
    drop(z);

    let mut d = vec![S::zero(); n * hw];
    meter.alloc(d.len());
    S::gemm(
        n,
        hidden,
        hw,
        S::one(),
        p.dense2_w.data(),
        hidden as isize,
        1,
        &a,
        hw as isize,
        1,
        S::zero(),
        &mut d,
        hw as isize,
        1,
    );
    meter.free(a.len());
    drop(a);

    let mut out = state.clone();
    meter.alloc(out.len());
    for (plane, dplane) in out.data_mut().chunks_mut(hw).zip(d.chunks(hw)) {
        for ((v, &dv), &m) in plane.iter_mut().zip(dplane).zip(mask) {
            *v += dv * m;
        }
    }
    meter.free(d.len());
    Ok(out.ensure_finite("nca_step")?)
}

/// Backbone parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub dense1_w: Var,
    pub dense1_b: Var,
    pub dense2_w: Var,
    n: usize,
}

impl BackboneVars {
    pub fn register<S: Scalar>(tape: &mut Tape<S>, p: &BackboneParams<S>) -> Self {
        Self {
            conv1_w: tape.param(p.conv1_w.clone()),
            conv1_b: tape.param(p.conv1_b.clone()),
            conv2_w: tape.param(p.conv2_w.clone()),
            conv2_b: tape.param(p.conv2_b.clone()),
            dense1_w: tape.param(p.dense1_w.clone()),
            dense1_b: tape.param(p.dense1_b.clone()),
            dense2_w: tape.param(p.dense2_w.clone()),
            n: p.n(),
        }
    }

    /// Moves this backbone's gradients out of `grads`.
    pub fn take_grads<S: Scalar>(&self, grads: &mut Gradients<S>) -> Result<BackboneParams<S>> {
        let mut take =
            |v: Var| grads.take(v).ok_or_else(|| Error::Invalid("gradient missing for a registered parameter".into()));
        Ok(BackboneParams {
            conv1_w: take(self.conv1_w)?,
            conv1_b: take(self.conv1_b)?,
            conv2_w: take(self.conv2_w)?,
            conv2_b: take(self.conv2_b)?,
            dense1_w: take(self.dense1_w)?,
            dense1_b: take(self.dense1_b)?,
            dense2_w: take(self.dense2_w)?,
        })
    }
}

/// One update recorded on the tape. The mask is a constant multiplier.
pub fn nca_step_taped<S: Scalar>(
    tape: &mut Tape<S>,
    state: Var,
    vars: &BackboneVars,
    fire_rate: f64,
    seed: u64,
    step_index: usize,
    origin: Origin,
) -> Result<Var> {
    let shape = tape.shape(state)?.to_vec();
    let [n, h, w] = shape[..] else {
        return Err(Error::Shape(format!("state shape {shape:?}")));
    };
    if n != vars.n {
        return Err(Error::Shape(format!("state has {n} channels, backbone expects {}", vars.n)));
    }
    let p1 = tape.conv3x3_reflect(state, vars.conv1_w, vars.conv1_b)?;
    let p2 = tape.conv3x3_reflect(state, vars.conv2_w, vars.conv2_b)?;
    let z = tape.concat(&[state, p1, p2])?;
    let a = tape.dense(z, vars.dense1_w, Some(vars.dense1_b))?;
    let r = tape.relu(a)?;
    let d = tape.dense(r, vars.dense2_w, None)?;
    let masked = tape.cell_mask(d, fire_mask(fire_rate, seed, step_index, origin, h, w))?;
    let next = tape.add(state, masked)?;
    tape.release(&[next]);
    Ok(next)
}

/// Taped rollout over step indices `0..steps`.
pub fn rollout_taped<S: Scalar>(
    tape: &mut Tape<S>,
    state: Var,
    vars: &BackboneVars,
    steps: usize,
    fire_rate: f64,
    seed: u64,
    origin: Origin,
) -> Result<Var> {
    (0..steps).try_fold(state, |s, i| nca_step_taped(tape, s, vars, fire_rate, seed, i, origin))
}

/// Convenience for tests and tools: forward through the tape-free kernels
/// one op at a time, mirroring [`nca_step_taped`] exactly.
pub fn nca_step_reference<S: Scalar>(state: &Tensor<S>, p: &BackboneParams<S>, mask: &[S]) -> Result<Tensor<S>> {
    let p1 = ops::conv3x3_reflect(state, &p.conv1_w, &p.conv1_b)?;
    let p2 = ops::conv3x3_reflect(state, &p.conv2_w, &p.conv2_b)?;
    let z = ops::concat_channels(&[state, &p1, &p2])?;
    let r = ops::relu(&ops::dense_per_cell(&z, &p.dense1_w, Some(&p.dense1_b))?)?;
    let d = ops::dense_per_cell(&r, &p.dense2_w, None)?;
    let (_, h, w) = state.chw()?;
    let mut out = state.clone();
    for (plane, dplane) in out.data_mut().chunks_mut(h * w).zip(d.data().chunks(h * w)) {
        for ((v, &dv), &m) in plane.iter_mut().zip(dplane).zip(mask) {
            *v += dv * m;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NcaConfig {
        NcaConfig { n: 4, h: 8, img_channels: 1, fire_rate: 1.0, steps: 3 }
    }

    fn randomized(cfg: &NcaConfig, seed: u64) -> BackboneParams<f64> {
        let mut p = init_params::<f64>(cfg, seed);
        let mut r = rng::chacha(seed, &[99]);
        for v in p.dense2_w.data_mut() {
            *v = r.random_range(-0.3..0.3);
        }
        p
    }

    fn random_state(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::chacha(seed, &[7]);
        let data = (0..n * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, h, w], data).unwrap()
    }

    #[test]
    fn published_parameter_counts() {
        assert_eq!(param_count(32, 128), 35008);
        assert_eq!(2 * param_count(32, 128), 70016);
        assert_eq!(param_count(16, 128), 12960);
        assert_eq!(2 * param_count(16, 128), 25920);
        assert_eq!(param_count(4, 8), 432);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = NcaConfig::default();
        let a = init_params::<f32>(&cfg, 11);
        assert_eq!(a, init_params::<f32>(&cfg, 11));
        assert_ne!(a, init_params::<f32>(&cfg, 12));
        assert!(a.dense2_w.data().iter().all(|&v| v == 0.0));
        let bound = (1.0 / (9.0 * 32.0f64)).sqrt() as f32;
        assert!(a.conv1_w.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.element_count(), param_count(32, 128));
    }

    #[test]
    fn config_validation() {
        assert!(NcaConfig::default().validate().is_ok());
        assert!(NcaConfig { n: 2, ..Default::default() }.validate().is_err());
        assert!(NcaConfig { fire_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(NcaConfig { fire_rate: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_init_and_empty_mask_leave_state_unchanged() {
        let cfg = small();
        let state = random_state(4, 6, 5, 1);
        let fresh = init_params::<f64>(&cfg, 3);
        assert_eq!(nca_step(&state, &fresh, 0.5, 9, 0).unwrap(), state);

        let p = randomized(&cfg, 3);
        let zero_mask = vec![0.0; 30];
        assert_eq!(step_plain(&state, &p, &zero_mask, &mut LiveMeter::new()).unwrap(), state);
        assert_eq!(nca_step_reference(&state, &p, &zero_mask).unwrap(), state);
    }

    #[test]
    fn fused_step_matches_reference() {
        let cfg = small();
        let p = randomized(&cfg, 5);
        let state = random_state(4, 7, 9, 2);
        let mask = fire_mask(0.5, 4, 0, Origin::default(), 7, 9);
        let fused = step_plain(&state, &p, &mask, &mut LiveMeter::new()).unwrap();
        let reference = nca_step_reference(&state, &p, &mask).unwrap();
        assert!(fused.max_abs_diff(&reference) < 1e-12);
        assert!(fused.max_abs_diff(&state) > 1e-3);
    }

    #[test]
    fn taped_step_matches_plain() {
        let cfg = small();
        let p = randomized(&cfg, 6);
        let state = random_state(4, 5, 5, 3);
        let mut tape = Tape::new();
        let vars = BackboneVars::register(&mut tape, &p);
        let s = tape.constant(state.clone());
        let out = rollout_taped(&mut tape, s, &vars, 3, 0.5, 8, Origin::default()).unwrap();
        let plain = rollout(&state, &p, 3, 0.5, 8).unwrap();
        assert!(tape.value(out).unwrap().max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn rollout_composes() {
        let cfg = small();
        let p = randomized(&cfg, 8);
        let state = random_state(4, 6, 6, 4);
        assert_eq!(rollout(&state, &p, 0, 0.5, 1).unwrap(), state);
        let full = rollout(&state, &p, 5, 0.5, 1).unwrap();
        let mut meter = LiveMeter::new();
        let head = rollout_metered(&state, &p, 0..2, 0.5, 1, Origin::default(), &mut meter).unwrap();
        let tail = rollout_metered(&head, &p, 2..5, 0.5, 1, Origin::default(), &mut meter).unwrap();
        assert_eq!(full, tail);
    }

    #[test]
    fn single_step_locality() {
        let cfg = small();
        let p = randomized(&cfg, 10);
        let a = random_state(4, 9, 9, 5);
        let mut b = a.clone();
        b.data_mut()[4 * 9 + 4] += 0.5;
        let ya = nca_step(&a, &p, 1.0, 0, 0).unwrap();
        let yb = nca_step(&b, &p, 1.0, 0, 0).unwrap();
        for c in 0..4 {
            for y in 0..9 {
                for x in 0..9 {
                    let i = (c * 9 + y) * 9 + x;
                    let far = (y as isize - 4).abs().max((x as isize - 4).abs()) > 1;
                    if far {
                        assert_eq!(ya.data()[i], yb.data()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_statistics() {
        let mut fired = 0usize;
        for step in 0..100 {
            fired += fire_mask::<f32>(0.5, 42, step, Origin::default(), 256, 256).iter().filter(|&&m| m == 1.0).count();
        }
        let frac = fired as f64 / (100.0 * 256.0 * 256.0);
        assert!((frac - 0.5).abs() < 0.01, "fire fraction {frac}");
    }

    #[test]
    fn mask_is_keyed_by_canvas_position() {
        let full = fire_mask::<f64>(0.5, 3, 2, Origin::default(), 8, 8);
        let patch = fire_mask::<f64>(0.5, 3, 2, Origin { y: 2, x: 3 }, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(patch[y * 4 + x], full[(y + 2) * 8 + x + 3]);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let p = init_params::<f64>(&small(), 0);
        assert!(nca_step(&Tensor::zeros(&[3, 4, 4]), &p, 1.0, 0, 0).is_err());
    }
}
