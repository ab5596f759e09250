//! Input-invariance transforms (scale, shape, translation) and synthetic
//! acquisition artefacts (ghosting, anisotropy, bias field).
//!
//! Geometric transforms move the mask with the image. Artefacts leave the
//! mask alone.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::engine::ops::{self, AxisTaps};
use crate::engine::ResampleMode;
use crate::pipeline::TrainSample;
use crate::{rng, Error, Result, Tensor};

/// Smallest side any geometric transform may produce.
pub const MIN_SIDE: usize = 8;
/// Half-width of the protected low-frequency band, as a fraction of the line length.
pub const GHOST_PROTECTED_FRACTION: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbKind {
    Scale,
    Shape,
    Translate,
    Ghosting,
    Anisotropy,
    BiasField,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 6] = [
        PerturbKind::Scale,
        PerturbKind::Shape,
        PerturbKind::Translate,
        PerturbKind::Ghosting,
        PerturbKind::Anisotropy,
        PerturbKind::BiasField,
    ];

    pub fn is_geometric(self) -> bool {
        matches!(self, PerturbKind::Scale | PerturbKind::Shape | PerturbKind::Translate)
    }

    /// Severity at which the transform is the identity.
    pub fn identity_severity(self) -> f64 {
        match self {
            PerturbKind::Scale | PerturbKind::Shape | PerturbKind::Anisotropy => 1.0,
            PerturbKind::Translate | PerturbKind::Ghosting | PerturbKind::BiasField => 0.0,
        }
    }

    /// Default sweep grid. Translation severities are fractions of the side.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            PerturbKind::Scale => vec![0.5, 0.8, 1.0, 1.2, 1.5, 2.0],
            PerturbKind::Shape => vec![0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
            PerturbKind::Translate => vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            PerturbKind::Ghosting | PerturbKind::BiasField => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            PerturbKind::Anisotropy => vec![1.0, 2.0, 4.0, 6.0, 8.0],
        }
    }

    fn severity_range(self) -> (f64, f64) {
        match self {
            PerturbKind::Scale | PerturbKind::Shape => (0.5, 2.0),
            PerturbKind::Translate => (0.0, 0.5),
            PerturbKind::Ghosting | PerturbKind::BiasField => (0.0, 1.0),
            PerturbKind::Anisotropy => (1.0, 8.0),
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbKind::Scale => "scale",
            PerturbKind::Shape => "shape",
            PerturbKind::Translate => "translate",
            PerturbKind::Ghosting => "ghosting",
            PerturbKind::Anisotropy => "anisotropy",
            PerturbKind::BiasField => "bias_field",
        })
    }
}

impl FromStr for PerturbKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown perturbation kind {s:?}")))
    }
}

/// `Horizontal` acts along image rows (the x axis), `Vertical` along columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Axis {
    Horizontal,
    #[default]
    Vertical,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Horizontal => "horizontal",
            Axis::Vertical => "vertical",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" => Ok(Axis::Horizontal),
            "vertical" => Ok(Axis::Vertical),
            _ => Err(Error::Invalid(format!("unknown axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub severity: f64,
    pub axis: Axis,
    pub seed: u64,
    /// Ghosting only.
    pub num_ghosts: usize,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, severity: f64) -> Self {
        Self { kind, severity, axis: Axis::default(), seed: 0, num_ghosts: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.severity_range();
        if !(lo..=hi).contains(&self.severity) {
            return Err(Error::Invalid(format!("{} severity {} outside [{lo}, {hi}]", self.kind, self.severity)));
        }
        if self.kind == PerturbKind::Anisotropy && self.severity.fract() != 0.0 {
            return Err(Error::Invalid("anisotropy factor must be an integer".into()));
        }
        if self.kind == PerturbKind::Ghosting && self.num_ghosts < 2 {
            return Err(Error::Invalid("ghosting needs num_ghosts >= 2".into()));
        }
        Ok(())
    }

    pub fn apply(&self, sample: &TrainSample<f32>) -> Result<TrainSample<f32>> {
        self.validate()?;
        let artefact = |image: Tensor<f32>| TrainSample { image, mask: sample.mask.clone() };
        match self.kind {
            PerturbKind::Scale => apply_scale(sample, self.severity),
            PerturbKind::Shape => apply_shape(sample, self.severity, self.axis),
            PerturbKind::Translate => {
                let (_, h, w) = sample.image.chw()?;
                let side = match self.axis {
                    Axis::Horizontal => w,
                    Axis::Vertical => h,
                };
                let t = (self.severity * side as f64).round() as isize;
                apply_translate(sample, t, self.axis)
            }
            PerturbKind::Ghosting => {
                Ok(artefact(apply_ghosting(&sample.image, self.num_ghosts, self.severity, self.axis)?))
            }
            PerturbKind::Anisotropy => {
                Ok(artefact(apply_anisotropy(&sample.image, self.severity as usize, self.axis)?))
            }
            PerturbKind::BiasField => Ok(artefact(apply_bias_field(&sample.image, self.severity, self.seed)?)),
        }
    }
}

fn round_to_4(v: f64) -> usize {
    ((v / 4.0).round() as usize) * 4
}

fn resize(sample: &TrainSample<f32>, oh: usize, ow: usize) -> Result<TrainSample<f32>> {
    if oh < MIN_SIDE || ow < MIN_SIDE {
        return Err(Error::Invalid(format!("resampled size {oh}x{ow} is below {MIN_SIDE}x{MIN_SIDE}")));
    }
    Ok(TrainSample {
        image: ops::resample(&sample.image, oh, ow, ResampleMode::Bilinear)?,
        mask: ops::resample(&sample.mask, oh, ow, ResampleMode::Nearest)?,
    })
}

/// Resize both axes by `r`, rounding each side to a multiple of 4.
pub fn apply_scale(sample: &TrainSample<f32>, r: f64) -> Result<TrainSample<f32>> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Invalid(format!("scale factor must be positive, got {r}")));
    }
    let (_, h, w) = sample.image.chw()?;
    resize(sample, round_to_4(r * h as f64), round_to_4(w as f64 * r))
}

/// Stretch one axis by `rv`.
pub fn apply_shape(sample: &TrainSample<f32>, rv: f64, axis: Axis) -> Result<TrainSample<f32>> {
    if !(rv > 0.0 && rv.is_finite()) {
        return Err(Error::Invalid(format!("stretch factor must be positive, got {rv}")));
    }
    let (_, h, w) = sample.image.chw()?;
    match axis {
        Axis::Vertical => resize(sample, round_to_4(rv * h as f64), w),
        Axis::Horizontal => resize(sample, h, round_to_4(rv * w as f64)),
    }
}

fn shift(t: &Tensor<f32>, by: isize, axis: Axis) -> Result<Tensor<f32>> {
    let (c, h, w) = t.chw()?;
    let mut out = Tensor::zeros(t.shape());
    let src = t.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match axis {
                    Axis::Vertical => (y as isize - by, x as isize),
                    Axis::Horizontal => (y as isize, x as isize - by),
                };
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Shift content by `t` pixels (positive = down / right), filling with 0.
pub fn apply_translate(sample: &TrainSample<f32>, t: isize, axis: Axis) -> Result<TrainSample<f32>> {
    let (_, h, w) = sample.image.chw()?;
    let side = match axis {
        Axis::Vertical => h,
        Axis::Horizontal => w,
    };
    if t.unsigned_abs() >= side {
        return Err(Error::Invalid(format!("translation {t} must be smaller than side {side}")));
    }
    Ok(TrainSample { image: shift(&sample.image, t, axis)?, mask: shift(&sample.mask, t, axis)? })
}

/// Gather each line along `axis` into a buffer, transform it, scatter back.
fn for_each_line(image: &Tensor<f32>, axis: Axis, mut f: impl FnMut(&mut [f64])) -> Result<Tensor<f32>> {
    let (c, h, w) = image.chw()?;
    let (lines, len) = match axis {
        Axis::Horizontal => (c * h, w),
        Axis::Vertical => (c * w, h),
    };
    let mut out = image.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0f64; len];
    for line in 0..lines {
        let index = |i: usize| match axis {
            Axis::Horizontal => line * w + i,
            Axis::Vertical => (line / w) * h * w + i * w + line % w,
        };
        for (i, b) in buf.iter_mut().enumerate() {
            *b = data[index(i)] as f64;
        }
        f(&mut buf);
        for (i, &b) in buf.iter().enumerate() {
            data[index(i)] = b as f32;
        }
    }
    Ok(out)
}

/// Attenuate every `k`-th spatial-frequency line along `axis` by `1 - s`,
/// keeping DC and the central low-frequency band, then clamp to `[0, 1]`.
pub fn apply_ghosting(image: &Tensor<f32>, k: usize, s: f64, axis: Axis) -> Result<Tensor<f32>> {
    if k < 2 {
        return Err(Error::Invalid("ghosting needs num_ghosts >= 2".into()));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Invalid(format!("ghosting intensity {s} outside [0, 1]")));
    }
    let (_, h, w) = image.chw()?;
    let n = match axis {
        Axis::Horizontal => w,
        Axis::Vertical => h,
    };
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let protected = GHOST_PROTECTED_FRACTION * n as f64;
    let gain: Vec<f64> = (0..n)
        .map(|j| {
            // Signed frequency, so that j and n - j are treated alike.
            let f = if j <= n / 2 { j as i64 } else { j as i64 - n as i64 };
            if f == 0 || (f.unsigned_abs() as f64) <= protected || f % k as i64 != 0 {
                1.0
            } else {
                1.0 - s
            }
        })
        .collect();
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    for_each_line(image, axis, |line| {
        for (c, &v) in spec.iter_mut().zip(line.iter()) {
            *c = Complex::new(v, 0.0);
        }
        fwd.process(&mut spec);
        for (c, &g) in spec.iter_mut().zip(&gain) {
            *c *= g;
        }
        inv.process(&mut spec);
        for (v, c) in line.iter_mut().zip(&spec) {
            *v = (c.re / n as f64).clamp(0.0, 1.0);
        }
    })
}

/// Taps averaging blocks of `f` samples; the last block may be partial.
fn pooling_taps(len: usize, f: usize) -> AxisTaps {
    (0..len.div_ceil(f))
        .map(|b| {
            let block: Vec<usize> = (b * f..((b + 1) * f).min(len)).collect();
            let wgt = 1.0 / block.len() as f64;
            block.into_iter().map(|i| (i, wgt)).collect()
        })
        .collect()
}

/// Average-pool by `f` along `axis`, then bilinearly resample back.
pub fn apply_anisotropy(image: &Tensor<f32>, f: usize, axis: Axis) -> Result<Tensor<f32>> {
    if f == 0 {
        return Err(Error::Invalid("anisotropy factor must be at least 1".into()));
    }
    if f == 1 {
        return Ok(image.clone());
    }
    let (_, h, w) = image.chw()?;
    let keep = |n: usize| ops::axis_taps(n, n, ResampleMode::Nearest);
    let (down_rows, down_cols, up_rows, up_cols) = match axis {
        Axis::Vertical => {
            let pooled = h.div_ceil(f);
            (pooling_taps(h, f), keep(w)?, ops::axis_taps(pooled, h, ResampleMode::Bilinear)?, keep(w)?)
        }
        Axis::Horizontal => {
            let pooled = w.div_ceil(f);
            (keep(h)?, pooling_taps(w, f), keep(h)?, ops::axis_taps(pooled, w, ResampleMode::Bilinear)?)
        }
    };
    let wide = image.cast::<f64>();
    let pooled = ops::resample_taps(&wide, &down_rows, &down_cols)?;
    let back = ops::resample_taps(&pooled, &up_rows, &up_cols)?;
    Ok(back.map(|v| v.clamp(0.0, 1.0)).cast())
}

/// Exponent pairs `(i, j)` with `1 <= i + j <= 3`, in coefficient order.
pub fn bias_monomials() -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for i in 0..=3u32 {
        for j in 0..=(3 - i) {
            if i + j > 0 {
                out.push((i, j));
            }
        }
    }
    out
}

/// Normalised coordinate of sample `i` out of `n`, spanning `[-1, 1]`.
pub fn unit_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// `log B` on an `h x w` grid; `u` runs along x and `v` along y.
pub fn log_bias_field(h: usize, w: usize, magnitude: f64, seed: u64) -> Result<Vec<f64>> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::Invalid(format!("bias magnitude must be >= 0, got {magnitude}")));
    }
    let mut r = rng::chacha(seed, &[0xb1a5]);
    let coeffs: Vec<((u32, u32), f64)> = bias_monomials()
        .into_iter()
        .map(|ij| {
            let c = if magnitude > 0.0 { r.random_range(-magnitude..=magnitude) } else { 0.0 };
            (ij, c)
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let v = unit_coord(y, h);
        for x in 0..w {
            let u = unit_coord(x, w);
            out.push(coeffs.iter().map(|&((i, j), c)| c * u.powi(i as i32) * v.powi(j as i32)).sum());
        }
    }
    Ok(out)
}

/// Multiply by a smooth positive field `exp(poly_3(u, v))` and clamp.
pub fn apply_bias_field(image: &Tensor<f32>, magnitude: f64, seed: u64) -> Result<Tensor<f32>> {
    let (c, h, w) = image.chw()?;
    let log_b = log_bias_field(h, w, magnitude, seed)?;
    let mut out = image.clone();
    for ch in 0..c {
        for (v, lb) in out.channel_mut(ch)?.iter_mut().zip(&log_b) {
            *v = ((*v as f64) * lb.exp()).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}
