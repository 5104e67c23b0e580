use proptest::prelude::*;
use rand::Rng;

use rvae_core::attack::{compare_with_certificate, pgd_ood_attack, AttackConfig};
use rvae_core::data::{batches, load_idx, synthetic_blobs, to_byte, write_idx};
use rvae_core::interval::{bound_affine, bound_square, IntervalTensor};
use rvae_core::rng::{seeded, standard_normal, uniform};
use rvae_core::robust::{
    elbo_lower_bound, elbo_lower_bound_batch, input_bounds, kl_bounds, lower_bound_graph, recon_sq_bounds,
    trace_bounds, EncoderBounds,
};
use rvae_core::tensor::{Tape, Tensor};
use rvae_core::vae::{self, Architecture, VaeModel, DEFAULT_SIGMA0};

const SLACK: f64 = 1e-9;

fn dense(side: usize, latent: usize, hidden: usize, seed: u64) -> VaeModel {
    VaeModel::new(Architecture::dense(&[1, side, side], latent, &[hidden]), DEFAULT_SIGMA0, seed).unwrap()
}

fn image(side: usize, seed: u64) -> Tensor {
    uniform(&mut seeded(seed), [1, side, side], 0.0, 1.0).unwrap()
}

/// A point of the clamped box around `x`.
fn interior(x: &Tensor, eps: f64, rng: &mut impl Rng) -> Tensor {
    let data = x.data().iter().map(|v| (v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0)).collect();
    Tensor::from_vec(x.dims().to_vec(), data).unwrap()
}

/// Row `0` of each bound stage must contain every row of the matching value stage.
fn assert_contains_rows(bounds: &[IntervalTensor], values: &[Tensor]) {
    assert_eq!(bounds.len(), values.len());
    for (stage, (iv, v)) in bounds.iter().zip(values).enumerate() {
        let (lo, hi) = (iv.lower().row(0).unwrap(), iv.upper().row(0).unwrap());
        for row in v.unstack() {
            for ((l, h), x) in lo.data().iter().zip(hi.data()).zip(row.data()) {
                assert!(*l - SLACK <= *x && *x <= *h + SLACK, "stage {stage}: {x} outside [{l}, {h}]");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn propagated_bounds_contain_interior_forward_values(
        seed in 0u64..10_000,
        side in 2usize..6,
        latent in 1usize..5,
        hidden in 1usize..12,
        eps in 0.0f64..0.3,
    ) {
        let model = dense(side, latent, hidden, seed);
        let x = image(side, seed + 1);
        let noise = standard_normal(&mut seeded(seed + 2), [1, latent]).unwrap();
        let bounds = trace_bounds(&model, &x, eps, &noise).unwrap();
        let mut rng = seeded(seed + 3);
        let points: Vec<Tensor> = (0..64).map(|_| interior(&x, eps, &mut rng)).collect();
        let xs = Tensor::stack(&points.iter().collect::<Vec<_>>()).unwrap();
        let reps = Tensor::stack(&vec![&noise.row(0).unwrap(); 64]).unwrap();
        assert_contains_rows(&bounds, &vae::trace(&model, &xs, &reps).unwrap());
        for iv in &bounds {
            prop_assert!(iv.lower().data().iter().zip(iv.upper().data()).all(|(l, u)| l <= u));
        }
    }

    #[test]
    fn bounds_grow_with_the_radius(
        seed in 0u64..10_000,
        e1 in 0.0f64..0.2,
        extra in 0.0f64..0.2,
    ) {
        let model = dense(4, 3, 6, seed);
        let x = image(4, seed + 7);
        let noise = standard_normal(&mut seeded(seed), [1, 3]).unwrap();
        let small = trace_bounds(&model, &x, e1, &noise).unwrap();
        let large = trace_bounds(&model, &x, e1 + extra, &noise).unwrap();
        for (s, l) in small.iter().zip(&large) {
            let widened = IntervalTensor::new(
                l.lower().map(|v| v - SLACK),
                l.upper().map(|v| v + SLACK),
            ).unwrap();
            prop_assert!(widened.encloses(s).unwrap());
        }
        let lb1 = elbo_lower_bound(&model, &x, e1, &noise.row(0).unwrap()).unwrap();
        let lb2 = elbo_lower_bound(&model, &x, e1 + extra, &noise.row(0).unwrap()).unwrap();
        prop_assert!(lb2.elbo_lower <= lb1.elbo_lower + SLACK);
    }

    #[test]
    fn zero_radius_bounds_are_exact(seed in 0u64..10_000, side in 2usize..5) {
        let model = dense(side, 2, 5, seed);
        let x = image(side, seed);
        let noise = standard_normal(&mut seeded(seed), [1, 2]).unwrap();
        let bounds = trace_bounds(&model, &x, 0.0, &noise).unwrap();
        let exact = vae::trace(&model, &x, &noise).unwrap();
        for (iv, v) in bounds.iter().zip(&exact) {
            for ((l, u), t) in iv.lower().data().iter().zip(iv.upper().data()).zip(v.data()) {
                prop_assert!((l - t).abs() <= 1e-12 && (u - t).abs() <= 1e-12);
            }
        }
        let terms = vae::elbo(&model, &x, &noise.row(0).unwrap()).unwrap();
        let lb = elbo_lower_bound(&model, &x, 0.0, &noise.row(0).unwrap()).unwrap();
        prop_assert!((lb.elbo_lower - terms.elbo).abs() < SLACK);
        prop_assert!((lb.kl.0 - terms.kl).abs() < SLACK && (lb.kl.1 - terms.kl).abs() < SLACK);
        prop_assert!((lb.recon_sq.0 - terms.recon_sq).abs() < SLACK && (lb.recon_sq.1 - terms.recon_sq).abs() < SLACK);
    }

    #[test]
    fn certified_bound_never_exceeds_perturbed_elbo(
        seed in 0u64..10_000,
        eps in prop::sample::select(vec![0.01, 0.05, 0.1]),
    ) {
        let model = dense(3, 2, 6, seed);
        let x = image(3, seed + 5);
        let noise = standard_normal(&mut seeded(seed + 6), [2]).unwrap();
        let lb = elbo_lower_bound(&model, &x, eps, &noise).unwrap().elbo_lower;
        let mut rng = seeded(seed + 8);
        let mut probes: Vec<Tensor> = (0..200).map(|_| interior(&x, eps, &mut rng)).collect();
        probes.push(x.map(|v| (v + eps).min(1.0)));
        probes.push(x.map(|v| (v - eps).max(0.0)));
        let xs = Tensor::stack(&probes.iter().collect::<Vec<_>>()).unwrap();
        let reps = Tensor::stack(&vec![&noise; probes.len()]).unwrap();
        for t in vae::elbo_batch(&model, &xs, &reps).unwrap() {
            prop_assert!(lb <= t.elbo + 1e-7, "{lb} > {}", t.elbo);
        }
    }

    #[test]
    fn kl_bounds_bracket_closed_form(
        seed in 0u64..10_000,
        j in 1usize..4,
        straddle in any::<bool>(),
    ) {
        let mut rng = seeded(seed);
        let mut mu_lo = Vec::new();
        let mut mu_hi = Vec::new();
        let mut ls_lo = Vec::new();
        let mut ls_hi = Vec::new();
        for _ in 0..j {
            let (a, b) = if straddle {
                (rng.random_range(-2.0..0.0), rng.random_range(0.0..2.0))
            } else {
                let a: f64 = rng.random_range(-2.0..2.0);
                (a, a + rng.random_range(0.0..1.0))
            };
            mu_lo.push(a);
            mu_hi.push(b);
            // Half the boxes contain log σ = 0, i.e. σ = 1.
            let c: f64 = if straddle { rng.random_range(-1.0..0.0) } else { rng.random_range(-1.5..1.0) };
            ls_lo.push(c);
            ls_hi.push(c + rng.random_range(0.0..1.5));
        }
        let mu = IntervalTensor::new(Tensor::vector(&mu_lo), Tensor::vector(&mu_hi)).unwrap();
        let logsigma = IntervalTensor::new(Tensor::vector(&ls_lo), Tensor::vector(&ls_hi)).unwrap();
        let sigma = IntervalTensor::new(logsigma.lower().map(f64::exp), logsigma.upper().map(f64::exp)).unwrap();
        let (lo, hi) = kl_bounds(&EncoderBounds { mu, logsigma, sigma }).unwrap();
        for _ in 0..500 {
            let mut kl = 0.0;
            for i in 0..j {
                let m = rng.random_range(mu_lo[i]..=mu_hi[i]);
                let s = rng.random_range(ls_lo[i]..=ls_hi[i]);
                kl += 0.5 * (m * m + (2.0 * s).exp() - 2.0 * s - 1.0);
            }
            prop_assert!(lo - SLACK <= kl && kl <= hi + SLACK, "{kl} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn residual_bound_matches_corner_enumeration(seed in 0u64..10_000, n in 1usize..10, eps in 0.0f64..0.3) {
        let mut rng = seeded(seed);
        let x = uniform(&mut rng, [n], 0.0, 1.0).unwrap();
        let a = uniform(&mut rng, [n], -0.5, 1.5).unwrap();
        let w = uniform(&mut rng, [n], 0.0, 0.6).unwrap();
        let g = IntervalTensor::new(a.clone(), a.zip_map(&w, |l, d| l + d).unwrap()).unwrap();
        let (lo, hi) = recon_sq_bounds(&x, eps, &g).unwrap();
        let (mut corner_max, mut corner_min) = (0.0, 0.0);
        for i in 0..n {
            let xs = [(x.data()[i] - eps).max(0.0), (x.data()[i] + eps).min(1.0)];
            let gs = [g.lower().data()[i], g.upper().data()[i]];
            let sq: Vec<f64> = xs.iter().flat_map(|xv| gs.iter().map(move |gv| (xv - gv).powi(2))).collect();
            corner_max += sq.iter().cloned().fold(f64::MIN, f64::max);
            corner_min += sq.iter().cloned().fold(f64::MAX, f64::min);
        }
        prop_assert!((hi - corner_max).abs() <= 1e-12 * (1.0 + corner_max));
        prop_assert!(lo <= corner_min + 1e-12);
    }

    #[test]
    fn batches_partition_the_index_range(len in 1usize..200, bs in 1usize..40, seed in any::<u64>()) {
        let b = batches(len, bs, seed).unwrap();
        prop_assert!(b[..b.len() - 1].iter().all(|c| c.len() == bs));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(b, batches(len, bs, seed).unwrap());
    }

    #[test]
    fn idx_round_trip_preserves_bytes(n in 1usize..12, side in 4usize..9, seed in any::<u64>()) {
        let data = synthetic_blobs(n, side, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train-images-idx3-ubyte");
        write_idx(&data, &path).unwrap();
        let back = load_idx(&path).unwrap();
        prop_assert_eq!(back.len(), n);
        for (a, b) in data.images().iter().zip(back.images()) {
            let (ba, bb): (Vec<u8>, Vec<u8>) = (a.data().iter().map(|&v| to_byte(v)).collect(), b.data().iter().map(|&v| to_byte(v)).collect());
            prop_assert_eq!(ba, bb);
            prop_assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        write_idx(&back, &path).unwrap();
        let again = load_idx(&path).unwrap();
        prop_assert_eq!(again.images(), back.images());
    }

    #[test]
    fn attacks_stay_feasible_and_under_the_certificate(
        seed in 0u64..10_000,
        eps in 0.0f64..0.25,
    ) {
        let model = dense(3, 2, 5, seed);
        let x = image(3, seed + 9);
        let cfg = AttackConfig { steps: 15, seed, ..AttackConfig::new(eps) };
        let r = pgd_ood_attack(&model, &x, &cfg).unwrap();
        prop_assert!(r.delta.max_abs() <= eps + 1e-9);
        for (xi, di) in x.data().iter().zip(r.delta.data()) {
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&(xi + di)));
        }
        prop_assert!(r.elbo_attacked <= r.elbo_clean);
        let c = compare_with_certificate(&model, &x, &cfg).unwrap();
        prop_assert!(c.elbo_lower <= c.elbo_attacked + 1e-7);
        prop_assert_eq!(r, pgd_ood_attack(&model, &x, &cfg).unwrap());
    }
}

#[test]
fn square_bound_is_sound_across_zero() {
    let iv = IntervalTensor::new(Tensor::vector(&[-2.0, -1.0, 0.5]), Tensor::vector(&[1.0, -0.5, 3.0])).unwrap();
    let sq = bound_square(&iv).unwrap();
    assert_eq!(sq.lower().data(), &[0.0, 0.25, 0.25]);
    assert_eq!(sq.upper().data(), &[4.0, 1.0, 9.0]);
}

#[test]
fn affine_bound_of_degenerate_box_is_exact() {
    let w = Tensor::from_vec([2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
    let b = Tensor::vector(&[0.1, -0.2]);
    let x = Tensor::from_vec([1, 3], vec![0.3, 0.7, -0.4]).unwrap();
    let out = bound_affine(&w, &b, &IntervalTensor::point(x)).unwrap();
    let want = [0.3 - 1.4 - 0.2 + 0.1, 2.1 + 0.4 - 0.2];
    for ((l, u), t) in out.lower().data().iter().zip(out.upper().data()).zip(want) {
        assert!((l - t).abs() < 1e-12 && (u - t).abs() < 1e-12);
    }
}

/// Central differences with step `1e-5` against the tape gradient, for a
/// scalar built from the model by `build`.
fn check_param_gradients(model: &VaeModel, build: impl Fn(&VaeModel, &Tape) -> (f64, Vec<Tensor>)) {
    let (_, analytic) = build(model, &Tape::new());
    let h = 1e-5;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (pi, name) in names.iter().enumerate() {
        let numel = model.params()[pi].1.numel();
        for k in 0..numel {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[pi].1.data_mut()[k] += delta;
                build(&m, &Tape::new()).0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(err < 1e-4, "{name}[{k}]: analytic {a}, numeric {numeric}");
        }
    }
}

#[test]
fn elbo_and_bound_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let model = dense(3, 2, 4, 100 + seed);
        let xs = Tensor::stack(&[&image(3, seed), &image(3, seed + 50)]).unwrap();
        let noise = standard_normal(&mut seeded(seed), [2, 2]).unwrap();
        check_param_gradients(&model, |m, tape| {
            let vae = m.bind(tape, true);
            let terms = vae.elbo(tape.constant(xs.clone()), tape.constant(noise.clone())).unwrap();
            let root = terms.elbo.sum();
            let grads = tape.backward(root).unwrap();
            (root.item().unwrap(), vae.params().iter().map(|&v| grads.wrt(v).clone()).collect())
        });
        check_param_gradients(&model, |m, tape| {
            let vae = m.bind(tape, true);
            let lb = lower_bound_graph(&vae, &xs, 0.05, &noise).unwrap();
            let root = lb.elbo_lower.sum();
            let grads = tape.backward(root).unwrap();
            (root.item().unwrap(), vae.params().iter().map(|&v| grads.wrt(v).clone()).collect())
        });
    }
}

#[test]
fn elbo_is_deterministic_and_kl_nonnegative() {
    let model = dense(4, 3, 6, 4);
    let x = image(4, 4);
    let noise = standard_normal(&mut seeded(1), [3]).unwrap();
    let a = vae::elbo(&model, &x, &noise).unwrap();
    assert_eq!(a, vae::elbo(&model, &x, &noise).unwrap());
    assert!(a.kl >= 0.0);
}

#[test]
fn batched_bound_matches_single_sample_bound() {
    let model = dense(3, 2, 5, 8);
    let xs = Tensor::stack(&[&image(3, 1), &image(3, 2)]).unwrap();
    let noise = standard_normal(&mut seeded(3), [2, 2]).unwrap();
    let batch = elbo_lower_bound_batch(&model, &xs, 0.07, &noise).unwrap();
    for (i, b) in batch.iter().enumerate() {
        let single = elbo_lower_bound(&model, &xs.row(i).unwrap(), 0.07, &noise.row(i).unwrap()).unwrap();
        assert!((b.elbo_lower - single.elbo_lower).abs() < 1e-12);
    }
    assert!(input_bounds(&image(3, 1), -0.1).is_err());
}
