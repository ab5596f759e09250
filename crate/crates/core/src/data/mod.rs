//! Synthetic organ-segmentation data: a deterministic generator of
//! star-convex blobs on a textured background, PGM file I/O and the
//! dataset manifest.

mod manifest;
pub mod pgm;

pub use manifest::{generate_dataset, split_of, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::pipeline::TrainSample;
use crate::{rng, Error, Result, Tensor};

pub const ORGAN_INTENSITY: f64 = 0.35;
pub const BACKGROUND_INTENSITY: f64 = 0.65;
/// Distractor blobs are darker than the organ and never part of the mask.
pub const DISTRACTOR_INTENSITY: f64 = 0.15;

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Base radius range as a fraction of `min(height, width)`.
    pub organ_radius_range: (f64, f64),
    pub deform_amplitude: f64,
    pub noise_sigma: f64,
    pub n_distractors: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 250,
            height: 128,
            width: 128,
            organ_radius_range: (0.12, 0.28),
            deform_amplitude: 0.3,
            noise_sigma: 0.05,
            n_distractors: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.organ_radius_range;
        if !(lo > 0.0 && hi >= lo && hi < 0.5) {
            return Err(Error::Config(format!("bad organ radius range ({lo}, {hi})")));
        }
        if self.noise_sigma < 0.0 || self.deform_amplitude < 0.0 {
            return Err(Error::Config("noise and deformation must be non-negative".into()));
        }
        if self.height < 16 || self.width < 16 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size {}x{} must be at least 16 and divisible by 4",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Radial profile `r(theta) = r0 (1 + A sum_{k=2..5} a_k cos(k theta + phi_k))`.
#[derive(Debug, Clone)]
struct Blob {
    cy: f64,
    cx: f64,
    r0: f64,
    harmonics: [(f64, f64); 4],
    amplitude: f64,
}

impl Blob {
    fn radius(&self, theta: f64) -> f64 {
        let wobble: f64 =
            self.harmonics.iter().enumerate().map(|(i, &(a, phi))| a * ((i + 2) as f64 * theta + phi).cos()).sum();
        (self.r0 * (1.0 + self.amplitude * wobble)).max(0.05 * self.r0)
    }

    fn max_radius(&self) -> f64 {
        let total: f64 = self.harmonics.iter().map(|h| h.0).sum();
        self.r0 * (1.0 + self.amplitude * total)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let d = (dy * dy + dx * dx).sqrt();
        d <= self.radius(dy.atan2(dx))
    }
}

/// Deterministic sample `index` of `spec`.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> TrainSample<f32> {
    let (h, w) = (spec.height, spec.width);
    let side = h.min(w) as f64;
    let mut r = rng::chacha(spec.seed, &[index as u64]);

    let (lo, hi) = spec.organ_radius_range;
    let r0 = r.random_range(lo..=hi) * side;
    let mut harmonics = [(0.0, 0.0); 4];
    for hk in &mut harmonics {
        *hk = (r.random_range(0.0..0.5), r.random_range(0.0..TAU));
    }
    let mut organ = Blob { cy: 0.0, cx: 0.0, r0, harmonics, amplitude: spec.deform_amplitude };
    let reach = organ.max_radius();
    let centre = |r: &mut rand_chacha::ChaCha8Rng, len: usize| {
        let len = len as f64;
        if 2.0 * reach < len {
            r.random_range(reach..=len - reach)
        } else {
            len / 2.0
        }
    };
    organ.cy = centre(&mut r, h);
    organ.cx = centre(&mut r, w);

    let mut distractors: Vec<Blob> = Vec::new();
    for _ in 0..spec.n_distractors {
        for _attempt in 0..64 {
            let rad = r.random_range(0.04..0.08) * side;
            let cand = Blob {
                cy: r.random_range(rad..h as f64 - rad),
                cx: r.random_range(rad..w as f64 - rad),
                r0: rad,
                harmonics: [(0.0, 0.0); 4],
                amplitude: 0.0,
            };
            let clear = |b: &Blob| {
                let d = ((b.cy - cand.cy).powi(2) + (b.cx - cand.cx).powi(2)).sqrt();
                d > b.max_radius() + cand.r0 + 2.0
            };
            if clear(&organ) && distractors.iter().all(clear) {
                distractors.push(cand);
                break;
            }
        }
    }

    let angle = r.random_range(0.0..TAU);
    let tilt = r.random_range(0.0..0.08);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");

    let mut image = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = organ.contains(py, px);
            let mut v = if inside {
                ORGAN_INTENSITY
            } else if distractors.iter().any(|d| d.contains(py, px)) {
                DISTRACTOR_INTENSITY
            } else {
                BACKGROUND_INTENSITY
            };
            let (u, vv) = (2.0 * px / w as f64 - 1.0, 2.0 * py / h as f64 - 1.0);
            v += tilt * (angle.cos() * u + angle.sin() * vv);
            if spec.noise_sigma > 0.0 {
                v += noise.sample(&mut r);
            }
            image.push(v.clamp(0.0, 1.0) as f32);
            mask.push(if inside { 1.0f32 } else { 0.0 });
        }
    }
    TrainSample {
        image: Tensor::from_vec(&[1, h, w], image).expect("shape"),
        mask: Tensor::from_vec(&[1, h, w], mask).expect("shape"),
    }
}

/// Number of 4-connected foreground components.
pub fn count_components(mask: &[f32], h: usize, w: usize) -> usize {
    let mut seen = vec![false; h * w];
    let mut components = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0.0 || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] != 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    components
}
