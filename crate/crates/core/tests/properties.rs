//! Randomised checks of the engine and the NCA against brute-force oracles.

use mednca::engine::ops::{self, ResampleMode};
use mednca::engine::Tape;
use mednca::losses::{dice_loss, dice_score};
use mednca::nca::{self, init_params, BackboneParams, BackboneVars, NcaConfig, Origin};
use mednca::{param_count, Tensor};
use proptest::prelude::*;

fn tensor(shape: &[usize], values: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, values).unwrap()
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

/// Backbone with every weight random, including the normally zero `dense2_w`.
fn random_params(n: usize, h: usize, seed: u64) -> BackboneParams<f64> {
    let cfg = NcaConfig { n, h, img_channels: 1, fire_rate: 1.0, steps: 1 };
    let mut p = init_params::<f64>(&cfg, seed);
    let mut k = seed;
    for v in p.dense2_w.data_mut() {
        k = mednca::rng::mix64(k);
        *v = mednca::rng::unit(k) * 0.6 - 0.3;
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradient_matches_finite_differences(
        x in values(2 * 4 * 5),
        w in values(3 * 2 * 9),
        b in values(3),
        probe in values(3 * 4 * 5),
    ) {
        // loss = sum(conv(x) * probe); compare d loss / d x and d loss / d w.
        let x = tensor(&[2, 4, 5], x);
        let w = tensor(&[3, 2, 3, 3], w);
        let b = tensor(&[3], b);
        let probe = tensor(&[3, 4, 5], probe);
        let loss_at = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let y = ops::conv3x3_reflect(x, w, &b).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
        let y = tape.conv3x3_reflect(xv, wv, bv).unwrap();
        let pv = tape.constant(probe.clone());
        let prod = tape.mul(y, pv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        let eps = 1e-6;
        for (var, base, is_x) in [(xv, &x, true), (wv, &w, false)] {
            let grad = g.get(var).unwrap();
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus.data_mut()[i] += eps;
                let mut minus = base.clone();
                minus.data_mut()[i] -= eps;
                let fd = if is_x {
                    (loss_at(&plus, &w) - loss_at(&minus, &w)) / (2.0 * eps)
                } else {
                    (loss_at(&x, &plus) - loss_at(&x, &minus)) / (2.0 * eps)
                };
                prop_assert!((fd - grad.data()[i]).abs() < 1e-7, "fd {} vs {}", fd, grad.data()[i]);
            }
        }
    }

    #[test]
    fn dense_is_linear_in_its_input(
        a in values(3 * 6), b in values(3 * 6), w in values(4 * 3), alpha in -2.0f64..2.0,
    ) {
        let (a, b, w) = (tensor(&[3, 2, 3], a), tensor(&[3, 2, 3], b), tensor(&[4, 3], w));
        let mut combo = a.clone();
        combo.scale(alpha);
        combo.add_assign(&b).unwrap();
        let lhs = ops::dense_per_cell(&combo, &w, None).unwrap();
        let mut rhs = ops::dense_per_cell(&a, &w, None).unwrap();
        rhs.scale(alpha);
        rhs.add_assign(&ops::dense_per_cell(&b, &w, None).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn resample_to_same_size_is_identity(v in values(2 * 5 * 7), mode in 0usize..3) {
        let t = tensor(&[2, 5, 7], v);
        let mode = [ResampleMode::Nearest, ResampleMode::AverageArea, ResampleMode::Bilinear][mode];
        prop_assert_eq!(ops::resample(&t, 5, 7, mode).unwrap(), t);
    }

    #[test]
    fn area_then_nearest_preserves_block_means(v in values(8 * 12)) {
        let t = tensor(&[1, 8, 12], v);
        let down = ops::resample(&t, 2, 3, ResampleMode::AverageArea).unwrap();
        let mean_in = t.sum() / t.len() as f64;
        let mean_down = down.sum() / down.len() as f64;
        prop_assert!((mean_in - mean_down).abs() < 1e-12);
    }

    #[test]
    fn dice_is_symmetric_and_permutation_invariant(
        bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..64),
        rot in 0usize..64,
    ) {
        let a: Vec<f64> = bits.iter().map(|p| p.0 as u8 as f64).collect();
        let b: Vec<f64> = bits.iter().map(|p| p.1 as u8 as f64).collect();
        let n = a.len();
        let (ta, tb) = (tensor(&[n], a.clone()), tensor(&[n], b.clone()));
        let d = dice_score(&ta, &tb).unwrap();
        prop_assert_eq!(d, dice_score(&tb, &ta).unwrap());
        let r = rot % n;
        let (mut ra, mut rb) = (a, b);
        ra.rotate_left(r);
        rb.rotate_left(r);
        prop_assert_eq!(d, dice_score(&tensor(&[n], ra), &tensor(&[n], rb)).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        // The soft loss agrees with 1 - Dice on binary inputs, up to eps.
        if ta.sum() + tb.sum() > 0.0 {
            prop_assert!((dice_loss(&ta, &tb, 0.0).unwrap() - (1.0 - d)).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count_matches_tensors(n in 3usize..20, h in 1usize..40) {
        let cfg = NcaConfig { n, h, ..Default::default() };
        let p = init_params::<f32>(&cfg, 0);
        prop_assert_eq!(p.element_count(), param_count(n, h));
        prop_assert_eq!(p.tensors().iter().map(|t| t.len()).sum::<usize>(), param_count(n, h));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn influence_cone_after_s_steps(
        steps in 1usize..6, py in 0usize..16, px in 0usize..16, seed in 0u64..1000,
    ) {
        let p = random_params(4, 8, seed);
        let mut r = seed;
        let base: Vec<f64> = (0..4 * 16 * 16).map(|_| { r = mednca::rng::mix64(r); mednca::rng::unit(r) }).collect();
        let a = tensor(&[4, 16, 16], base);
        let mut b = a.clone();
        b.data_mut()[py * 16 + px] += 0.25;
        let ya = nca::rollout(&a, &p, steps, 1.0, 0).unwrap();
        let yb = nca::rollout(&b, &p, steps, 1.0, 0).unwrap();
        for c in 0..4 {
            for y in 0..16 {
                for x in 0..16 {
                    // Reflect padding mirrors the perturbed cell across the border,
                    // so its images also count as sources.
                    let images = [py as isize, -(py as isize), 30 - py as isize];
                    let ximages = [px as isize, -(px as isize), 30 - px as isize];
                    let reach = images.iter().flat_map(|&iy| ximages.iter().map(move |&ix| (iy, ix)))
                        .map(|(iy, ix)| (y as isize - iy).abs().max((x as isize - ix).abs()) as usize)
                        .min().unwrap();
                    if reach > steps {
                        let i = (c * 16 + y) * 16 + x;
                        prop_assert_eq!(ya.data()[i], yb.data()[i], "cell ({}, {}) at distance {}", y, x, reach);
                    }
                }
            }
        }
    }

    #[test]
    fn interior_translation_equivariance(
        dy in 0usize..6, dx in 0usize..6, seed in 0u64..1000, steps in 1usize..4,
    ) {
        // A 6x6 pattern on a constant background, embedded at two offsets.
        let p = random_params(4, 8, seed);
        let size = 24;
        let embed = |oy: usize, ox: usize| {
            let mut t = Tensor::<f64>::full(&[4, size, size], 0.2);
            for c in 0..4 {
                for y in 0..6 {
                    for x in 0..6 {
                        let v = ((c * 36 + y * 6 + x) as f64 * 0.37 + seed as f64).sin();
                        t.data_mut()[(c * size + oy + y) * size + ox + x] = v;
                    }
                }
            }
            t
        };
        let (o1, o2) = ((8, 8), (8 + dy, 8 + dx));
        let y1 = nca::rollout(&embed(o1.0, o1.1), &p, steps, 1.0, 3).unwrap();
        let y2 = nca::rollout(&embed(o2.0, o2.1), &p, steps, 1.0, 3).unwrap();
        // Cells whose cone stays clear of the border in both embeddings.
        for c in 0..4 {
            for y in 0..size - dy {
                for x in 0..size - dx {
                    let clear = |y: usize, x: usize| {
                        y >= steps && x >= steps && y + steps < size && x + steps < size
                    };
                    if clear(y, x) && clear(y + dy, x + dx) {
                        let a = y1.data()[(c * size + y) * size + x];
                        let b = y2.data()[(c * size + y + dy) * size + x + dx];
                        prop_assert_eq!(a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn taped_rollout_gradient_matches_finite_differences(seed in 0u64..1000) {
        let p = random_params(4, 6, seed);
        let state = tensor(&[4, 5, 5], (0..100).map(|i| ((i as f64 + seed as f64) * 0.61).sin()).collect());
        let loss_of = |p: &BackboneParams<f64>| -> f64 {
            nca::rollout(&state, p, 2, 0.5, seed).unwrap().data().iter().map(|v| v * v).sum()
        };
        let mut tape = Tape::new();
        let vars = BackboneVars::register(&mut tape, &p);
        let s0 = tape.constant(state.clone());
        let out = nca::rollout_taped(&mut tape, s0, &vars, 2, 0.5, seed, Origin::default()).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum(sq).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = vars.take_grads(&mut grads).unwrap();
        let eps = 1e-6;
        for (t, gt) in g.tensors().iter().enumerate() {
            // A handful of coordinates per tensor keeps the check quick.
            for i in (0..gt.len()).step_by(gt.len().div_ceil(5)) {
                let mut plus = p.clone();
                plus.tensors_mut()[t].data_mut()[i] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[t].data_mut()[i] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let an = gt.data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                prop_assert!(rel < 1e-5, "tensor {} index {}: fd {} vs {}", t, i, fd, an);
            }
        }
    }
}
