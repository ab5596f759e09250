//! Experiment drivers behind the CLI: evaluation, perturbation sweeps and
//! the activation/parameter benchmark. Every report renders as CSV.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{DatasetManifest, Split};
use crate::losses::{mean_std, EvalReport};
use crate::par::{self, Execution};
use crate::perturb::{PerturbKind, PerturbSpec};
use crate::pipeline::{self, InferOptions, MedNcaModel, TrainSample};
use crate::trainer::dice_per_image;
use crate::{losses, rng, Error, Result, Tensor};

/// Seed used for inference fire masks when the caller does not pick one.
pub const DEFAULT_EVAL_SEED: u64 = 0;

/// Load one split, failing if it is empty.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<(Vec<String>, Vec<TrainSample<f32>>)> {
    let pairs = manifest.load_split(split)?;
    if pairs.is_empty() {
        return Err(Error::Manifest(format!("split {split} is empty")));
    }
    Ok(pairs.into_iter().unzip())
}

pub fn evaluate(
    exec: Execution,
    model: &MedNcaModel<f32>,
    ids: Vec<String>,
    samples: &[TrainSample<f32>],
    seed: u64,
) -> Result<EvalReport> {
    let dice = dice_per_image(exec, model, samples, seed)?;
    EvalReport::new(ids, dice)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: PerturbKind,
    pub severity: f64,
    pub ids: Vec<String>,
    pub per_image_dice: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// One line per (severity, image): `kind,severity,id,dice,mean,std`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,severity,id,dice,mean,std\n");
        for r in &self.rows {
            for (id, d) in r.ids.iter().zip(&r.per_image_dice) {
                let _ = writeln!(s, "{},{},{id},{d},{},{}", r.kind, r.severity, r.mean, r.std);
            }
        }
        s
    }

    pub fn row(&self, severity: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.severity == severity)
    }
}

/// Perturb every sample at every severity of `grid`, run inference and
/// score in the perturbed space. `template` supplies axis, seed and ghost
/// count. Image `i` always uses inference seed `derive(seed, [i])`, so the
/// identity row reproduces [`evaluate`] exactly.
pub fn sweep(
    exec: Execution,
    model: &MedNcaModel<f32>,
    ids: &[String],
    samples: &[TrainSample<f32>],
    template: PerturbSpec,
    grid: &[f64],
    seed: u64,
) -> Result<SweepReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("sweep needs at least one image".into()));
    }
    for &severity in grid {
        PerturbSpec { severity, ..template }.validate()?;
    }
    let n = samples.len();
    let scores = par::map_indexed(exec, grid.len() * n, |job| -> Result<f64> {
        let (g, i) = (job / n, job % n);
        let spec = PerturbSpec { severity: grid[g], ..template };
        let p = spec.apply(&samples[i])?;
        let out = pipeline::infer(model, &p.image, rng::derive(seed, &[i as u64]), InferOptions::default())?;
        losses::dice_score(&out.mask, &p.mask)
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let rows = grid
        .iter()
        .enumerate()
        .map(|(g, &severity)| {
            let dice = scores[g * n..(g + 1) * n].to_vec();
            let (mean, std) = mean_std(&dice);
            SweepRow { kind: template.kind, severity, ids: ids.to_vec(), per_image_dice: dice, mean, std }
        })
        .collect();
    Ok(SweepReport { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub param_count: usize,
    pub infer_peak_live: usize,
    pub train_saved: usize,
    pub naive_train_saved: usize,
    pub infer_wall_secs: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.naive_train_saved as f64 / self.train_saved as f64
    }
}

/// Activation accounting and inference wall time on square images.
pub fn bench(model: &MedNcaModel<f32>, sizes: &[usize]) -> Result<Vec<BenchRow>> {
    sizes
        .iter()
        .map(|&size| {
            let f = model.scale_factor;
            if size % 4 != 0 || size % f != 0 || size < 2 * f {
                return Err(Error::Invalid(format!("bench size {size} must be a multiple of 4 and {f}")));
            }
            let image = Tensor::full(&[1, size, size], 0.5f32);
            let t0 = Instant::now();
            let out = pipeline::infer(model, &image, 0, InferOptions::default())?;
            let infer_wall_secs = t0.elapsed().as_secs_f64();
            Ok(BenchRow {
                size,
                param_count: model.param_count(),
                infer_peak_live: out.peak_live,
                train_saved: pipeline::training_activation_scalars(model, size, size)?,
                naive_train_saved: pipeline::naive_training_activation_scalars(model, size, size)?,
                infer_wall_secs,
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("size,param_count,infer_peak_live,train_saved,naive_train_saved,ratio,infer_wall_secs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6}",
            r.size,
            r.param_count,
            r.infer_peak_live,
            r.train_saved,
            r.naive_train_saved,
            r.ratio(),
            r.infer_wall_secs
        );
    }
    s
}
