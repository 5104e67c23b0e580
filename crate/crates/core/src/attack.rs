//! Out-of-distribution PGD attack: search `‖δ‖∞ <= ε` with `x + δ ∈ [0, 1]`
//! that minimizes the ELBO of `x + δ`.
//!
//! The objective for one sample is the ELBO averaged over a fixed set of
//! noise draws, so every iteration optimizes the same deterministic
//! function. Sweeps report ELBO values under a second, independent set of
//! draws.

use crate::data::Dataset;
use crate::error::{Error, Result};
use rand::Rng;

use crate::rng::{derive_seed, seeded, standard_normal};
use crate::robust::{elbo_lower_bound_batch, mean_std};
use crate::tensor::{Tape, Tensor};
use crate::vae::VaeModel;

pub const DEFAULT_STEPS: usize = 40;
pub const DEFAULT_NOISE_DRAWS: usize = 4;
/// Default total step budget as a multiple of the radius.
pub const STEP_BUDGET: f64 = 2.5;

const SAMPLES_PER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub eps: f64,
    pub steps: usize,
    /// Signed-gradient step length; `None` means `2.5·ε / steps`.
    pub step_size: Option<f64>,
    pub n_noise: usize,
    /// Extra PGD runs from uniform random starts inside the ball; the lowest
    /// objective across all runs wins.
    pub restarts: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(eps: f64) -> Self {
        AttackConfig { eps, steps: DEFAULT_STEPS, step_size: None, n_noise: DEFAULT_NOISE_DRAWS, restarts: 0, seed: 0 }
    }

    pub fn step_size_for(&self, eps: f64) -> f64 {
        self.step_size.unwrap_or(STEP_BUDGET * eps / self.steps as f64)
    }

    fn validate(&self, eps: f64) -> Result<()> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("attack radius must be >= 0, got {eps}")));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.n_noise == 0 {
            return Err(Error::Config("attack needs at least one noise draw".into()));
        }
        if let Some(s) = self.step_size {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("step size must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// Result of attacking one sample, with ELBO values under the attack noise.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub delta: Tensor,
    pub elbo_clean: f64,
    pub elbo_attacked: f64,
}

/// Per-sample ELBO averaged over `k` noise rows per sample, and optionally
/// the gradient with respect to the inputs. `noise` is `[B·k, J]`, sample-major.
fn objective(
    model: &VaeModel,
    xs: &Tensor,
    noise: &Tensor,
    k: usize,
    want_grad: bool,
) -> Result<(Vec<f64>, Option<Tensor>)> {
    let b = xs.dims()[0];
    let rows = xs.unstack();
    let repeated: Vec<&Tensor> = rows.iter().flat_map(|r| std::iter::repeat_n(r, k)).collect();
    let xr = Tensor::stack(&repeated)?;
    let tape = Tape::new();
    let x = if want_grad { tape.param(xr) } else { tape.constant(xr) };
    let terms = model.bind(&tape, false).elbo(x, tape.constant(noise.clone()))?;
    let per_row = terms.elbo.to_tensor();
    let values: Vec<f64> = per_row.data().chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect();
    if !want_grad {
        return Ok((values, None));
    }
    let grads = tape.backward(terms.elbo.sum())?;
    let g = grads.wrt(x);
    let per = g.numel() / (b * k);
    let mut out = vec![0.0; b * per];
    for (i, chunk) in g.data().chunks(per).enumerate() {
        for (o, v) in out[(i / k) * per..(i / k + 1) * per].iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Ok((values, Some(Tensor::from_vec(xs.dims().to_vec(), out)?)))
}

/// `clamp(x + δ, 0, 1) - x` with `δ` first clipped to `±eps`.
fn project(x: &Tensor, delta: &Tensor, eps: f64) -> Result<Tensor> {
    x.zip_map(delta, |xi, di| (xi + di.clamp(-eps, eps)).clamp(0.0, 1.0) - xi)
}

fn add(x: &Tensor, delta: &Tensor) -> Result<Tensor> {
    x.zip_map(delta, |a, b| a + b)
}

struct PgdOutcome {
    delta: Tensor,
    best: Vec<f64>,
    start: Vec<f64>,
}

/// Batched PGD from `init`, keeping each sample's lowest-objective iterate
/// (the starting point included).
#[allow(clippy::too_many_arguments)]
fn pgd(
    model: &VaeModel,
    xs: &Tensor,
    init: &Tensor,
    noise: &Tensor,
    k: usize,
    eps: f64,
    steps: usize,
    step: f64,
) -> Result<PgdOutcome> {
    let mut delta = project(xs, init, eps)?;
    let (start, grad) = objective(model, &add(xs, &delta)?, noise, k, true)?;
    let mut grad = grad.expect("gradient requested");
    let mut best = start.clone();
    let mut best_delta = delta.clone();
    let per = xs.numel() / xs.dims()[0];
    for _ in 0..steps {
        let stepped = delta.zip_map(&grad, |d, g| d - step * sign(g))?;
        delta = project(xs, &stepped, eps)?;
        let (values, g) = objective(model, &add(xs, &delta)?, noise, k, true)?;
        grad = g.expect("gradient requested");
        for (i, &v) in values.iter().enumerate() {
            if v < best[i] {
                best[i] = v;
                best_delta.data_mut()[i * per..(i + 1) * per].copy_from_slice(&delta.data()[i * per..(i + 1) * per]);
            }
        }
    }
    Ok(PgdOutcome { delta: best_delta, best, start })
}

/// PGD from `init`, then from `cfg.restarts` uniform starts. Sample `i`'s
/// restart `r` draws its start from stream `r + 1` of `streams[i]`.
fn pgd_with_restarts(
    model: &VaeModel,
    xs: &Tensor,
    init: &Tensor,
    noise: &Tensor,
    eps: f64,
    cfg: &AttackConfig,
    streams: &[u64],
) -> Result<PgdOutcome> {
    let (k, steps, step) = (cfg.n_noise, cfg.steps, cfg.step_size_for(eps));
    let mut out = pgd(model, xs, init, noise, k, eps, steps, step)?;
    let per = xs.numel() / xs.dims()[0];
    for r in 0..cfg.restarts {
        let mut start = Vec::with_capacity(xs.numel());
        for &s in streams {
            let mut rng = seeded(derive_seed(s, r as u64 + 1));
            start.extend((0..per).map(|_| if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 }));
        }
        let start = Tensor::from_vec(xs.dims().to_vec(), start)?;
        let run = pgd(model, xs, &start, noise, k, eps, steps, step)?;
        for i in 0..streams.len() {
            if run.best[i] < out.best[i] {
                out.best[i] = run.best[i];
                out.delta.data_mut()[i * per..(i + 1) * per].copy_from_slice(&run.delta.data()[i * per..(i + 1) * per]);
            }
        }
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_input(model: &VaeModel, x: &Tensor) -> Result<()> {
    if x.dims() != model.data_shape() {
        return Err(Error::dim("attack input", x.dims(), model.data_shape()));
    }
    if let Some(i) = x.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract(format!("input element {i} is outside [0, 1]")));
    }
    Ok(())
}

/// PGD on a single sample with `cfg.n_noise` draws from `cfg.seed`.
pub fn pgd_ood_attack(model: &VaeModel, x: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate(cfg.eps)?;
    check_input(model, x)?;
    let noise = standard_normal(&mut seeded(cfg.seed), [cfg.n_noise, model.latent_dim()])?;
    let (xs, _) = model.as_batch(x)?;
    let zero = Tensor::zeros_like(&xs);
    let out = pgd_with_restarts(model, &xs, &zero, &noise, cfg.eps, cfg, &[derive_seed(cfg.seed, 1)])?;
    Ok(AttackResult { delta: out.delta.row(0)?, elbo_clean: out.start[0], elbo_attacked: out.best[0] })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleAttack {
    pub elbo_clean: f64,
    pub elbo_attacked: f64,
    pub delta_norm: f64,
    pub delta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub eps: f64,
    pub mean_elbo: f64,
    pub std_elbo: f64,
    pub samples: Vec<SampleAttack>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub points: Vec<SweepPoint>,
}

fn noise_rows(model: &VaeModel, seed: u64, streams: impl Iterator<Item = u64>, k: usize) -> Result<Tensor> {
    let rows = streams
        .map(|s| standard_normal(&mut seeded(derive_seed(seed, s)), [k, model.latent_dim()]))
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = rows.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::from_vec([data.len() / model.latent_dim(), model.latent_dim()], data)
}

/// Attacks every sample at each radius of an ascending list.
///
/// Each radius starts from the previous radius's perturbation, and a sample
/// keeps that perturbation when the new PGD result scores no lower, so every
/// per-sample curve (and the mean curve) is non-increasing. Sample `i` uses
/// attack noise stream `2i` and evaluation noise stream `2i + 1` of `cfg.seed`.
pub fn attack_sweep(model: &VaeModel, dataset: &Dataset, eps_list: &[f64], cfg: &AttackConfig) -> Result<AttackReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if eps_list.is_empty() {
        return Err(Error::Config("radius list is empty".into()));
    }
    if eps_list.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config(format!("radius list must be ascending: {eps_list:?}")));
    }
    for &eps in eps_list {
        cfg.validate(eps)?;
    }
    let k = cfg.n_noise;
    let mut per_radius: Vec<Vec<SampleAttack>> = vec![Vec::with_capacity(dataset.len()); eps_list.len()];
    let all: Vec<usize> = (0..dataset.len()).collect();
    for idx in all.chunks(SAMPLES_PER_CHUNK) {
        let xs = dataset.batch(idx)?;
        let attack_noise = noise_rows(model, cfg.seed, idx.iter().map(|&i| 2 * i as u64), k)?;
        let eval_noise = noise_rows(model, cfg.seed, idx.iter().map(|&i| 2 * i as u64 + 1), k)?;
        let (clean, _) = objective(model, &xs, &eval_noise, k, false)?;
        let mut delta = Tensor::zeros_like(&xs);
        let mut current = clean.clone();
        let per = xs.numel() / idx.len();
        let streams: Vec<u64> = idx.iter().map(|&i| derive_seed(cfg.seed, 2 * i as u64)).collect();
        for (r, &eps) in eps_list.iter().enumerate() {
            let out = pgd_with_restarts(model, &xs, &delta, &attack_noise, eps, cfg, &streams)?;
            let (candidate, _) = objective(model, &add(&xs, &out.delta)?, &eval_noise, k, false)?;
            for i in 0..idx.len() {
                if candidate[i] <= current[i] {
                    current[i] = candidate[i];
                    delta.data_mut()[i * per..(i + 1) * per].copy_from_slice(&out.delta.data()[i * per..(i + 1) * per]);
                }
            }
            for (i, d) in delta.unstack().into_iter().enumerate() {
                per_radius[r].push(SampleAttack {
                    elbo_clean: clean[i],
                    elbo_attacked: current[i],
                    delta_norm: d.max_abs(),
                    delta: d,
                });
            }
        }
    }
    let points = eps_list
        .iter()
        .zip(per_radius)
        .map(|(&eps, samples)| {
            let values: Vec<f64> = samples.iter().map(|s| s.elbo_attacked).collect();
            let (mean_elbo, std_elbo) = mean_std(&values);
            SweepPoint { eps, mean_elbo, std_elbo, samples }
        })
        .collect();
    Ok(AttackReport { points })
}

/// Paired attack and certificate values under shared noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// Noise-averaged ELBO at the PGD perturbation.
    pub elbo_attacked: f64,
    /// Noise-averaged certified lower bound at the same radius.
    pub elbo_lower: f64,
    /// Sample standard deviation of the per-draw certified bounds.
    pub spread: f64,
    pub delta: Tensor,
}

/// Runs PGD and the certified bound with the same noise draws. For each
/// draw the bound cannot exceed the ELBO at any admissible perturbation, so
/// `elbo_lower <= elbo_attacked` up to round-off.
pub fn compare_with_certificate(model: &VaeModel, x: &Tensor, cfg: &AttackConfig) -> Result<Comparison> {
    let attack = pgd_ood_attack(model, x, cfg)?;
    let noise = standard_normal(&mut seeded(cfg.seed), [cfg.n_noise, model.latent_dim()])?;
    let xs = Tensor::stack(&vec![x; cfg.n_noise])?;
    let lower: Vec<f64> =
        elbo_lower_bound_batch(model, &xs, cfg.eps, &noise)?.into_iter().map(|b| b.elbo_lower).collect();
    let (elbo_lower, spread) = mean_std(&lower);
    Ok(Comparison { elbo_attacked: attack.elbo_attacked, elbo_lower, spread, delta: attack.delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, Split};
    use crate::vae::{Architecture, DEFAULT_SIGMA0};

    fn model(seed: u64) -> VaeModel {
        VaeModel::new(Architecture::dense(&[1, 4, 4], 3, &[8]), DEFAULT_SIGMA0, seed).unwrap()
    }

    fn x() -> Tensor {
        Tensor::from_vec([1, 4, 4], (0..16).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap()
    }

    #[test]
    fn zero_radius_leaves_input() {
        let r = pgd_ood_attack(&model(0), &x(), &AttackConfig::new(0.0)).unwrap();
        assert_eq!(r.delta.max_abs(), 0.0);
        assert_eq!(r.elbo_attacked, r.elbo_clean);
    }

    #[test]
    fn attack_is_feasible_and_no_worse_than_clean() {
        let m = model(1);
        for eps in [0.01, 0.1, 0.3] {
            let r = pgd_ood_attack(&m, &x(), &AttackConfig::new(eps)).unwrap();
            assert!(r.delta.max_abs() <= eps + 1e-12);
            let adv = add(&x(), &r.delta).unwrap();
            assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(r.elbo_attacked <= r.elbo_clean);
        }
        assert!(
            pgd_ood_attack(&m, &x(), &AttackConfig::new(0.1)).unwrap().elbo_attacked
                < pgd_ood_attack(&m, &x(), &AttackConfig::new(0.0)).unwrap().elbo_attacked
        );
    }

    #[test]
    fn restarts_never_weaken_the_attack() {
        let m = model(5);
        let plain = pgd_ood_attack(&m, &x(), &AttackConfig::new(0.1)).unwrap();
        let more = pgd_ood_attack(&m, &x(), &AttackConfig { restarts: 3, ..AttackConfig::new(0.1) }).unwrap();
        assert!(more.elbo_attacked <= plain.elbo_attacked);
        assert!(more.delta.max_abs() <= 0.1 + 1e-12);
    }

    #[test]
    fn attack_is_deterministic() {
        let m = model(2);
        let c = AttackConfig::new(0.05);
        assert_eq!(pgd_ood_attack(&m, &x(), &c).unwrap(), pgd_ood_attack(&m, &x(), &c).unwrap());
    }

    #[test]
    fn sweep_curve_is_monotone() {
        let m = model(3);
        let data = synthetic_blobs(6, 4, 1).unwrap();
        let cfg = AttackConfig { steps: 10, ..AttackConfig::new(0.0) };
        let rep = attack_sweep(&m, &data, &[0.0, 0.02, 0.05, 0.1], &cfg).unwrap();
        for w in rep.points.windows(2) {
            assert!(w[1].mean_elbo <= w[0].mean_elbo);
        }
        let clean = rep.points[0].samples.iter().map(|s| s.elbo_clean).sum::<f64>() / 6.0;
        assert!((rep.points[0].mean_elbo - clean).abs() < 1e-12);
        assert!(attack_sweep(&m, &data, &[0.1, 0.05], &cfg).is_err());
        assert!(attack_sweep(&m, &data, &[], &cfg).is_err());
        assert_eq!(Dataset::new("x", Split::Test, vec![]).unwrap_err().to_string(), "dataset is empty");
    }

    #[test]
    fn certificate_lower_bounds_attack() {
        let m = model(4);
        for eps in [0.0, 0.01, 0.05] {
            let c = compare_with_certificate(&m, &x(), &AttackConfig::new(eps)).unwrap();
            assert!(c.elbo_lower <= c.elbo_attacked + 1e-7, "{eps}: {c:?}");
            if eps == 0.0 {
                assert!((c.elbo_lower - c.elbo_attacked).abs() < 1e-9);
            }
        }
    }
}
