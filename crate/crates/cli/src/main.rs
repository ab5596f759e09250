use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mednca::checkpoint;
use mednca::config::RunConfig;
use mednca::data::{self, pgm, DatasetManifest, Split, SynthSpec, MANIFEST_FILE};
use mednca::harness;
use mednca::par::Execution;
use mednca::perturb::{Axis, PerturbKind, PerturbSpec};
use mednca::pipeline::{self, InferOptions};
use mednca::trainer::{self, StopReason};
use mednca::MedNcaModel;

/// Worker-count cap for the data-parallel loops.
const THREADS_ENV: &str = "MEDNCA_THREADS";

#[derive(Parser)]
#[command(name = "mednca", version, about = "Two-stage NCA segmentation: data, training, evaluation")]
struct Cli {
    /// Run every loop sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (PGM pairs plus manifest).
    GenData(GenDataArgs),
    /// Train a model and write the best checkpoint and history CSV.
    Train(TrainArgs),
    /// Segment one PGM image.
    Infer(InferArgs),
    /// Per-image and aggregate Dice on one split.
    Eval(EvalArgs),
    /// Dice under a perturbation at each severity of a grid.
    Sweep(SweepArgs),
    /// Parameter and activation accounting over image sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 250)]
    count: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    deform: f64,
    #[arg(long, default_value_t = 3)]
    distractors: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest file or the directory containing it.
    #[arg(long)]
    data: PathBuf,
    /// `key=value` file; see `mednca::config::KEYS`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for `model.ckpt`, `history.csv` and `config.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
    /// Optional 16-bit probability map.
    #[arg(long)]
    out_prob: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = harness::DEFAULT_EVAL_SEED)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = harness::DEFAULT_EVAL_SEED)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// scale, shape, translate, ghosting, anisotropy or bias_field.
    #[arg(long)]
    kind: String,
    /// Comma-separated severities; the kind's default grid when omitted.
    #[arg(long)]
    severity_grid: Option<String>,
    #[arg(long, default_value = "vertical")]
    axis: String,
    #[arg(long, default_value_t = 4)]
    num_ghosts: usize,
    /// Seeds both the stochastic artefacts and inference.
    #[arg(long, default_value_t = harness::DEFAULT_EVAL_SEED)]
    seed: u64,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Freshly initialised default model when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "64,128,256")]
    size_grid: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a, exec),
        Cmd::Train(a) => train(a, exec),
        Cmd::Infer(a) => infer(a),
        Cmd::Eval(a) => eval(a, exec),
        Cmd::Sweep(a) => sweep(a, exec),
        Cmd::Bench(a) => bench(a),
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_manifest(data: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(data);
    DatasetManifest::load(&path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<MedNcaModel<f32>> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(a: GenDataArgs, exec: Execution) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        count: a.count,
        height: a.size,
        width: a.size,
        deform_amplitude: a.deform,
        noise_sigma: a.noise,
        n_distractors: a.distractors,
        ..SynthSpec::default()
    };
    let m = data::generate_dataset(&spec, &a.out, exec)?;
    let n = |s| m.split(s).count();
    eprintln!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        m.entries.len(),
        n(Split::Train),
        n(Split::Val),
        n(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, exec: Execution) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_file(p)?;
    }
    for s in &a.set {
        cfg.set_assignment(s)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.exec = exec;
    cfg.validate()?;

    let manifest = load_manifest(&a.data)?;
    let train: Vec<_> = manifest.load_split(Split::Train)?.into_iter().map(|p| p.1).collect();
    let val: Vec<_> = manifest.load_split(Split::Val)?.into_iter().map(|p| p.1).collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let model = MedNcaModel::<f32>::new(cfg.model, cfg.scale_factor, cfg.train.seed)?;
    let result = trainer::fit(model, &train, &val, &cfg.train, |r| {
        eprintln!("epoch {:>4}  loss {:.5}  val_dice {:.4}  lr {:.2e}", r.epoch, r.train_loss, r.val_dice, r.lr);
    })?;
    checkpoint::save(&a.out.join("model.ckpt"), &result.best)?;
    emit(Some(&a.out.join("history.csv")), &trainer::history_csv(&result.history))?;
    emit(Some(&a.out.join("config.txt")), &cfg.to_text())?;
    let why = match result.stop {
        StopReason::Completed => "all epochs run",
        StopReason::EarlyStopped => "early stop",
        StopReason::TimeBudget => "wall-clock budget reached",
    };
    match (result.best_epoch, result.best_val_dice) {
        (Some(e), Some(d)) => eprintln!("best val_dice {d:.4} at epoch {e} ({why})"),
        _ => eprintln!("no epochs run; saved the initial model"),
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_ckpt(&a.ckpt)?;
    let image = pgm::read_image(&a.image)?;
    let (_, h, w) = image.chw()?;
    if h < 8 || w < 8 {
        bail!("image {h}x{w} is smaller than 8x8");
    }
    let opts = InferOptions { threshold: a.threshold, ..Default::default() };
    let out = pipeline::infer(&model, &image, a.seed, opts)?;
    pgm::write_mask(&a.out_mask, &out.mask)?;
    if let Some(p) = &a.out_prob {
        pgm::write_image(p, &out.prob)?;
    }
    Ok(())
}

fn eval(a: EvalArgs, exec: Execution) -> Result<()> {
    let split: Split = a.split.parse()?;
    let model = load_ckpt(&a.ckpt)?;
    let manifest = load_manifest(&a.data)?;
    let (ids, samples) = harness::load_split(&manifest, split)?;
    let report = harness::evaluate(exec, &model, ids, &samples, a.seed)?;
    eprintln!("{split}: dice {:.4} +- {:.4} over {} images", report.mean, report.std, report.n_images);
    emit(a.out.as_deref(), &report.to_csv())
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',').map(|s| s.trim().parse::<f64>().with_context(|| format!("bad severity {s:?}"))).collect()
}

fn sweep(a: SweepArgs, exec: Execution) -> Result<()> {
    let kind: PerturbKind = a.kind.parse()?;
    let axis: Axis = a.axis.parse()?;
    let split: Split = a.split.parse()?;
    let grid = match &a.severity_grid {
        Some(g) => parse_grid(g)?,
        None => kind.default_grid(),
    };
    let model = load_ckpt(&a.ckpt)?;
    let manifest = load_manifest(&a.data)?;
    let (ids, samples) = harness::load_split(&manifest, split)?;
    let template = PerturbSpec { axis, seed: a.seed, num_ghosts: a.num_ghosts, ..PerturbSpec::new(kind, 0.0) };
    let report = harness::sweep(exec, &model, &ids, &samples, template, &grid, a.seed)?;
    for r in &report.rows {
        eprintln!("{kind} {:>6}: dice {:.4} +- {:.4}", r.severity, r.mean, r.std);
    }
    emit(a.out.as_deref(), &report.to_csv())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = match &a.ckpt {
        Some(p) => load_ckpt(p)?,
        None => MedNcaModel::new(Default::default(), 4, 0)?,
    };
    let sizes = a
        .size_grid
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad size {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let rows = harness::bench(&model, &sizes)?;
    emit(a.out.as_deref(), &harness::bench_csv(&rows))
}
