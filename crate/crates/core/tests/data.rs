use std::fs;

use mednca::data::pgm::{self, Pgm};
use mednca::data::{count_components, generate_dataset, generate_sample, DatasetManifest, Split, SynthSpec};
use mednca::par::Execution;
use mednca::Tensor;
use tempfile::TempDir;

#[test]
fn foreground_fraction_stays_in_range() {
    let spec = SynthSpec { count: 1000, ..Default::default() };
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for i in 0..spec.count {
        let s = generate_sample(&spec, i);
        let frac = s.mask.sum() as f64 / s.mask.len() as f64;
        lo = lo.min(frac);
        hi = hi.max(frac);
    }
    assert!(lo >= 0.01 && hi <= 0.4, "foreground fraction range [{lo}, {hi}]");
}

#[test]
fn mask_is_one_four_connected_component() {
    for seed in [0, 1] {
        let spec = SynthSpec { seed, count: 200, deform_amplitude: 0.6, ..Default::default() };
        for i in 0..spec.count {
            let s = generate_sample(&spec, i);
            assert_eq!(count_components(s.mask.data(), 128, 128), 1, "seed {seed} sample {i}");
        }
    }
}

#[test]
fn organ_is_darker_than_background() {
    let spec = SynthSpec { noise_sigma: 0.0, ..Default::default() };
    let s = generate_sample(&spec, 4);
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
    for (&v, &m) in s.image.data().iter().zip(s.mask.data()) {
        if m == 1.0 {
            fg += v as f64;
            nf += 1;
        } else {
            bg += v as f64;
            nb += 1;
        }
    }
    assert!(fg / (nf as f64) < 0.45 && bg / (nb as f64) > 0.5);
}

#[test]
fn image_round_trip_within_quantisation() {
    let spec = SynthSpec { height: 32, width: 48, ..Default::default() };
    let dir = TempDir::new().unwrap();
    for i in 0..5 {
        let s = generate_sample(&spec, i);
        let (ip, mp) = (dir.path().join("i.pgm"), dir.path().join("m.pgm"));
        pgm::write_image(&ip, &s.image).unwrap();
        pgm::write_mask(&mp, &s.mask).unwrap();
        let back = pgm::read_image(&ip).unwrap();
        assert!(back.max_abs_diff(&s.image) <= 1.0 / 65535.0);
        assert_eq!(pgm::read_mask(&mp).unwrap(), s.mask);
        // Writing the decoded image again reproduces the same bytes.
        let again = dir.path().join("again.pgm");
        pgm::write_image(&again, &back).unwrap();
        assert_eq!(fs::read(&ip).unwrap(), fs::read(&again).unwrap());
    }
    let header = fs::read(dir.path().join("i.pgm")).unwrap();
    assert!(header.starts_with(b"P5\n48 32\n65535\n"));
}

#[test]
fn eight_bit_images_are_read_too() {
    let p = Pgm { width: 2, height: 1, maxval: 255, samples: vec![0, 51] };
    let t = pgm::pgm_to_image(&Pgm::decode(&p.encode()).unwrap());
    assert_eq!(t, Tensor::from_vec(&[1, 1, 2], vec![0.0, 0.2]).unwrap());
}

#[test]
fn dataset_regenerates_bit_identically() {
    let dir = TempDir::new().unwrap();
    let spec = SynthSpec { seed: 21, count: 30, height: 32, width: 32, ..Default::default() };
    let written = generate_dataset(&spec, dir.path(), Execution::Parallel).unwrap();
    let loaded = DatasetManifest::load(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(loaded, written);
    assert!(loaded.verify_regeneration().unwrap().is_empty());

    // Sequential generation writes the same bytes.
    let other = TempDir::new().unwrap();
    generate_dataset(&spec, other.path(), Execution::Sequential).unwrap();
    for e in &loaded.entries {
        assert_eq!(fs::read(dir.path().join(&e.image)).unwrap(), fs::read(other.path().join(&e.image)).unwrap());
    }

    // Tampering with one file is detected.
    let victim = dir.path().join(&loaded.entries[3].image);
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&victim, bytes).unwrap();
    assert_eq!(loaded.verify_regeneration().unwrap(), vec!["00003".to_string()]);
}

#[test]
fn splits_are_disjoint_and_files_must_exist() {
    let dir = TempDir::new().unwrap();
    let spec = SynthSpec { count: 20, height: 16, width: 16, ..Default::default() };
    let m = generate_dataset(&spec, dir.path(), Execution::Sequential).unwrap();
    let ids = |s| m.split(s).map(|e| e.index).collect::<Vec<_>>();
    let (tr, va, te) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    assert_eq!((tr.len(), va.len(), te.len()), (16, 2, 2));
    assert!(tr.iter().all(|i| !va.contains(i) && !te.contains(i)));
    assert!(va.iter().all(|i| !te.contains(i)));

    let (ids, samples): (Vec<_>, Vec<_>) = m.load_split(Split::Val).unwrap().into_iter().unzip();
    assert_eq!(ids, vec!["00016", "00017"]);
    assert_eq!(samples[0], quantised(generate_sample(&spec, 16)));

    fs::remove_file(dir.path().join("masks/00005.pgm")).unwrap();
    let err = DatasetManifest::load(&dir.path().join("manifest.tsv")).unwrap_err();
    assert!(err.to_string().contains("00005"), "{err}");
}

/// What a sample looks like after a trip through 16-bit PGM.
fn quantised(mut s: mednca::TrainSample<f32>) -> mednca::TrainSample<f32> {
    s.image = pgm::pgm_to_image(&pgm::image_to_pgm(&s.image).unwrap());
    s
}
