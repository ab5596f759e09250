use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mednca::checkpoint;
use mednca::data::{pgm, DatasetManifest};
use mednca::losses::{mean_std, EvalReport};
use mednca::{MedNcaModel, NcaConfig, Tensor};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mednca")).args(args).env_remove("MEDNCA_THREADS").output().expect("spawn mednca")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 8] = ["--set", "n=6", "--set", "h=8", "--set", "steps=3", "--set", "fire_rate=1"];

/// Small dataset plus an untrained tiny checkpoint.
fn fixture(count: usize) -> (TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let count = count.to_string();
    ok(&["gen-data", "--seed", "3", "--count", &count, "--size", "16", "--out", p(&data)]);
    let run_dir = dir.path().join("run");
    let mut args = vec!["train", "--data", p(&data), "--epochs", "0", "--out", p(&run_dir)];
    args.extend(TINY);
    ok(&args);
    let ckpt = run_dir.join("model.ckpt");
    (dir, data, ckpt)
}

#[test]
fn gen_data_zero_count() {
    let dir = TempDir::new().unwrap();
    ok(&["gen-data", "--count", "0", "--out", p(dir.path())]);
    let m = DatasetManifest::load(&dir.path().join("manifest.tsv")).unwrap();
    assert!(m.entries.is_empty());
}

#[test]
fn gen_data_is_deterministic_with_default_split() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "5", "--count", "250", "--size", "16", "--out", p(d.path())]);
    }
    let m = DatasetManifest::load(&a.path().join("manifest.tsv")).unwrap();
    let count = |s| m.split(s).count();
    use mednca::data::Split::*;
    assert_eq!((count(Train), count(Val), count(Test)), (200, 25, 25));
    for e in &m.entries {
        for rel in [&e.image, &e.mask] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }
    assert_eq!(fs::read(a.path().join("manifest.tsv")).unwrap(), fs::read(b.path().join("manifest.tsv")).unwrap());
}

#[test]
fn train_rejects_missing_manifest() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.tsv");
    let out = run(&["train", "--data", p(&missing), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("manifest"), "{}", stderr(&out));
}

#[test]
fn epochs_zero_saves_initial_model() {
    let (_dir, _data, ckpt) = fixture(10);
    let cfg = NcaConfig { n: 6, h: 8, steps: 3, fire_rate: 1.0, ..Default::default() };
    let expected = MedNcaModel::<f32>::new(cfg, 4, 0).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), checkpoint::encode(&expected).unwrap());
    let history = fs::read_to_string(ckpt.with_file_name("history.csv")).unwrap();
    assert_eq!(history, "epoch,train_loss,val_dice,lr\n");
}

#[test]
fn config_file_and_flag_precedence() {
    let (dir, data, _) = fixture(10);
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "n=6\nh=8\nsteps=2\nepochs=5\nseed=9\n").unwrap();
    let out_dir = dir.path().join("run2");
    ok(&["train", "--data", p(&data), "--config", p(&conf), "--epochs", "0", "--set", "h=4", "--out", p(&out_dir)]);
    let text = fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(text.contains("epochs=0\n") && text.contains("h=4\n") && text.contains("seed=9\n"));
    let m = checkpoint::load(&out_dir.join("model.ckpt")).unwrap();
    assert_eq!((m.config.n, m.config.h, m.config.steps), (6, 4, 2));
}

#[test]
fn infer_keeps_input_size_and_rejects_bad_magic() {
    let (dir, _data, ckpt) = fixture(10);
    let image = dir.path().join("odd.pgm");
    let t = Tensor::from_vec(&[1, 18, 21], (0..18 * 21).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
    pgm::write_image(&image, &t).unwrap();
    let mask = dir.path().join("mask.pgm");
    let prob = dir.path().join("prob.pgm");
    ok(&["infer", "--ckpt", p(&ckpt), "--image", p(&image), "--out-mask", p(&mask), "--out-prob", p(&prob)]);
    assert_eq!(pgm::read_mask(&mask).unwrap().shape(), &[1, 18, 21]);
    let pr = pgm::Pgm::read(&prob).unwrap();
    assert_eq!((pr.height, pr.width, pr.maxval), (18, 21, 65535));

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = run(&["infer", "--ckpt", p(&bad), "--image", p(&image), "--out-mask", p(&mask)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bad checkpoint magic"), "{}", stderr(&out));

    let full = fs::read(&ckpt).unwrap();
    fs::write(&bad, &full[..full.len() - 4]).unwrap();
    assert!(!run(&["infer", "--ckpt", p(&bad), "--image", p(&image), "--out-mask", p(&mask)]).status.success());

    let small = dir.path().join("small.pgm");
    pgm::write_image(&small, &Tensor::zeros(&[1, 6, 12])).unwrap();
    assert!(!run(&["infer", "--ckpt", p(&ckpt), "--image", p(&small), "--out-mask", p(&mask)]).status.success());
}

#[test]
fn eval_on_own_predictions_is_perfect() {
    let (dir, data, ckpt) = fixture(20);
    let m = DatasetManifest::load(&data.join("manifest.tsv")).unwrap();
    // Replace every ground-truth mask with the model's own prediction.
    for e in &m.entries {
        let tmp = dir.path().join("pred.pgm");
        let img = data.join(&e.image);
        ok(&["infer", "--ckpt", p(&ckpt), "--image", p(&img), "--out-mask", p(&tmp)]);
        fs::copy(&tmp, data.join(&e.mask)).unwrap();
    }
    let out = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--split", "test"]);
    let report = EvalReport::from_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(report.n_images, 2);
    assert!(report.per_image_dice.iter().all(|&d| d == 1.0));
    assert_eq!(report.mean, 1.0);
}

#[test]
fn eval_aggregates_match_rows_and_empty_split_fails() {
    let (dir, data, ckpt) = fixture(20);
    let csv = dir.path().join("eval.csv");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--split", "train", "--out", p(&csv)]);
    let report = EvalReport::from_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(report.n_images, report.per_image_dice.len());
    let (mean, std) = mean_std(&report.per_image_dice);
    assert!((mean - report.mean).abs() < 1e-9 && (std - report.std).abs() < 1e-9);

    let (_d2, small, ckpt2) = fixture(5);
    let out = run(&["eval", "--ckpt", p(&ckpt2), "--data", p(&small), "--split", "val"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));
    assert!(!run(&["eval", "--ckpt", p(&ckpt2), "--data", p(&small), "--split", "holdout"]).status.success());
}

#[test]
fn sweep_identity_row_matches_eval_and_is_reproducible() {
    let (_dir, data, ckpt) = fixture(20);
    let eval = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--seed", "4"]);
    let eval = EvalReport::from_csv(&String::from_utf8(eval.stdout).unwrap()).unwrap();
    let args = [
        "sweep",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--kind",
        "scale",
        "--severity-grid",
        "1.0,1.5",
        "--seed",
        "4",
    ];
    let a = ok(&args).stdout;
    let b = ok(&args).stdout;
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let identity: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("scale,1,"))
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(identity, eval.per_image_dice);

    let out = run(&["sweep", "--ckpt", p(&ckpt), "--data", p(&data), "--kind", "blur"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown perturbation kind"));
}

#[test]
fn bench_reports_default_parameter_count() {
    let out = ok(&["bench", "--size-grid", "32"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "32");
    assert_eq!(row[1], "70016");
    let ratio: f64 = row[5].parse().unwrap();
    assert!(ratio >= 16.0, "{ratio}");
    assert!(!run(&["bench", "--size-grid", "30"]).status.success());
}

#[test]
fn thread_cap_is_validated() {
    let dir = TempDir::new().unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_mednca"))
        .args(["gen-data", "--count", "1", "--size", "16", "--out", p(dir.path())])
        .env("MEDNCA_THREADS", "0")
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("MEDNCA_THREADS"));
    let good = Command::new(env!("CARGO_BIN_EXE_mednca"))
        .args(["gen-data", "--count", "3", "--size", "16", "--out", p(dir.path())])
        .env("MEDNCA_THREADS", "2")
        .output()
        .unwrap();
    assert!(good.status.success(), "{}", stderr(&good));
}
