//! Certified lower bound on the ELBO under ℓ∞ input perturbations.
//!
//! The input box is pushed through the encoder trunk and both heads, the
//! reparameterization `z = μ + σ ⊙ ε` (with the noise split by sign), and
//! the decoder. The KL term and the squared reconstruction error are then
//! bounded from above, giving
//!
//! ```text
//! elbo_lower = -recon_sq_upper / (2σ₀²) - kl_upper  <=  elbo(x + δ)
//! ```
//!
//! for every `‖δ‖∞ <= ε` with `x + δ ∈ [0, 1]`, for the same noise vector.

mod train;

pub use train::{
    evaluate, init_model, train_epoch, EpochMetrics, EpsSchedule, EvalMetrics, OptimizerKind, TrainConfig, Trainer,
};

use crate::error::{Error, Result};
use crate::interval::{Bounds, IntervalTensor};
use crate::rng::{seeded, standard_normal};
use crate::tensor::{Tape, Tensor, Var};
use crate::vae::{BoundVae, VaeModel};

/// Default number of noise draws averaged by [`certify`].
pub const DEFAULT_CERTIFY_NOISE: usize = 16;

/// Bounds on the encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBounds {
    pub mu: IntervalTensor,
    pub logsigma: IntervalTensor,
    /// `exp` of the `log σ` bounds; strictly positive.
    pub sigma: IntervalTensor,
}

/// Certified ELBO lower bound for one sample and one noise vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundedElbo {
    pub elbo_lower: f64,
    /// `(lower, upper)` bounds on the KL term. Only the upper bound enters
    /// `elbo_lower`; the lower bound is diagnostic.
    pub kl: (f64, f64),
    /// `(lower, upper)` bounds on `‖x + δ - g(z)‖²`.
    pub recon_sq: (f64, f64),
    pub z_bounds: IntervalTensor,
    pub noise: Tensor,
}

/// `[x - ε, x + ε]` clamped to the valid pixel range `[0, 1]`.
pub fn input_bounds(x: &Tensor, eps: f64) -> Result<IntervalTensor> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("perturbation radius must be >= 0, got {eps}")));
    }
    if let Some(i) = x.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract(format!("input element {i} = {} is outside [0, 1]", x.data()[i])));
    }
    IntervalTensor::new(x.map(|v| (v - eps).max(0.0)), x.map(|v| (v + eps).min(1.0)))
}

/// Tape-recorded pieces of the certified bound for a batch; `[B]` each
/// unless noted.
pub struct LowerBoundVars<'t> {
    pub elbo_lower: Var<'t>,
    pub kl_upper: Var<'t>,
    /// Not differentiated; diagnostic only.
    pub kl_lower: Tensor,
    pub recon_upper: Var<'t>,
    pub recon_lower: Var<'t>,
    pub mu: Bounds<'t>,
    pub logsigma: Bounds<'t>,
    pub z: Bounds<'t>,
    pub decoded: Bounds<'t>,
}

/// Records the full bound chain for a batch `xs: [B, C, H, W]` with noise
/// `[B, J]`.
pub fn lower_bound_graph<'t>(vae: &BoundVae<'t>, xs: &Tensor, eps: f64, noise: &Tensor) -> Result<LowerBoundVars<'t>> {
    let tape =
        vae.params().first().map(|v| v.tape()).ok_or_else(|| Error::Contract("model has no parameters".into()))?;
    let input = input_bounds(xs, eps)?;
    let x_bounds = Bounds::constant(tape, &input);
    let (mu, logsigma) = vae.encode_bounds(x_bounds)?;
    let (kl_lower, kl_upper) = kl_bounds_graph(mu, logsigma)?;
    let z = latent_bounds_graph(mu, logsigma, tape.constant(noise.clone()))?;
    let decoded = vae.decode_bounds(z)?;
    let residual = Bounds { lower: x_bounds.lower.sub(decoded.upper)?, upper: x_bounds.upper.sub(decoded.lower)? };
    let (recon_lower, recon_upper) = residual.sum_squares_rows()?;
    let s0 = vae.sigma0();
    let elbo_lower = recon_upper.scale(-1.0 / (2.0 * s0 * s0)).sub(kl_upper)?;
    Ok(LowerBoundVars { elbo_lower, kl_upper, kl_lower, recon_upper, recon_lower, mu, logsigma, z, decoded })
}

/// `f(s) = s - log s` at `s = σ² = exp(2 log σ)`.
fn neg_log_var_term(logsigma: Var<'_>) -> Result<Var<'_>> {
    let two = logsigma.scale(2.0);
    two.exp().sub(two)
}

/// Per-row KL bounds from `μ` and `log σ` bounds.
///
/// The upper bound takes the worse endpoint of the convex `s - log s` and of
/// `μ²`. The lower bound uses the interior minimum `s = 1` when the variance
/// interval contains it, and 0 for a `μ` interval straddling 0.
fn kl_bounds_graph<'t>(mu: Bounds<'t>, logsigma: Bounds<'t>) -> Result<(Tensor, Var<'t>)> {
    let j = mu.lower.dims().last().copied().unwrap_or(1) as f64;
    let var_term = neg_log_var_term(logsigma.lower)?.maximum(neg_log_var_term(logsigma.upper)?)?;
    let mean_term = mu.lower.square().maximum(mu.upper.square())?;
    let upper = var_term.add(mean_term)?.sum_rows()?.scale(0.5).add_scalar(-0.5 * j);

    let (ml, mu_hi) = (mu.lower.to_tensor(), mu.upper.to_tensor());
    let (sl, sh) = (logsigma.lower.to_tensor(), logsigma.upper.to_tensor());
    let rows = ml.dims()[0];
    let per = ml.numel() / rows;
    let f = |ls: f64| (2.0 * ls).exp() - 2.0 * ls;
    let lower: Vec<f64> = (0..rows)
        .map(|r| {
            let mut acc = 0.0;
            for i in r * per..(r + 1) * per {
                let (a, b) = (sl.data()[i], sh.data()[i]);
                // log σ² = 0 is the unconstrained minimizer of s - log s
                let var_min = if a <= 0.0 && 0.0 <= b { 1.0 } else { f(a).min(f(b)) };
                let (lo, hi) = (ml.data()[i], mu_hi.data()[i]);
                let mean_min = if lo <= 0.0 && 0.0 <= hi { 0.0 } else { (lo * lo).min(hi * hi) };
                acc += var_min + mean_min - 1.0;
            }
            0.5 * acc
        })
        .collect();
    Ok((Tensor::from_vec([rows], lower)?, upper))
}

/// `z_lower = μ_lower + σ_upper ε₋ + σ_lower ε₊`, `z_upper = μ_upper + σ_lower ε₋ + σ_upper ε₊`.
fn latent_bounds_graph<'t>(mu: Bounds<'t>, logsigma: Bounds<'t>, noise: Var<'t>) -> Result<Bounds<'t>> {
    let tape = noise.tape();
    let n = noise.to_tensor();
    let pos = tape.constant(n.map(|v| v.max(0.0)));
    let neg = tape.constant(n.map(|v| v.min(0.0)));
    let (sig_lo, sig_hi) = (logsigma.lower.exp(), logsigma.upper.exp());
    let lower = mu.lower.add(sig_hi.mul(neg)?.add(sig_lo.mul(pos)?)?)?;
    let upper = mu.upper.add(sig_lo.mul(neg)?.add(sig_hi.mul(pos)?)?)?;
    Ok(Bounds { lower, upper })
}

fn single_or_batch_noise(model: &VaeModel, noise: &Tensor, rows: usize) -> Result<Tensor> {
    let j = model.latent_dim();
    match *noise.dims() {
        [n] if n == j && rows == 1 => noise.reshape([1, j]),
        [b, n] if b == rows && n == j => Ok(noise.clone()),
        _ => Err(Error::dim("noise", noise.dims(), &[rows, j])),
    }
}

/// Interval bounds on `μ`, `log σ` and `σ` for an input box (one sample or a batch).
pub fn encoder_bounds(model: &VaeModel, iv_x: &IntervalTensor) -> Result<EncoderBounds> {
    let (lo, single) = model.as_batch(iv_x.lower())?;
    let (hi, _) = model.as_batch(iv_x.upper())?;
    let tape = Tape::new();
    let vae = model.bind(&tape, false);
    let (mu, ls) = vae.encode_bounds(Bounds::constant(&tape, &IntervalTensor::new(lo, hi)?))?;
    let sigma = ls.monotonic(crate::tensor::UnaryKind::Exp)?;
    let snap = |b: Bounds<'_>| -> Result<IntervalTensor> {
        let iv = b.to_interval()?;
        if single {
            let (l, u) = iv.into_parts();
            IntervalTensor::new(l.row(0)?, u.row(0)?)
        } else {
            Ok(iv)
        }
    };
    Ok(EncoderBounds { mu: snap(mu)?, logsigma: snap(ls)?, sigma: snap(sigma)? })
}

/// `(lower, upper)` bounds on `KL(N(μ, σ²) ‖ N(0, 1))` summed over all
/// latent coordinates in `eb`.
pub fn kl_bounds(eb: &EncoderBounds) -> Result<(f64, f64)> {
    let flat = |t: &Tensor| t.reshape([1, t.numel()]);
    let tape = Tape::new();
    let mu = Bounds { lower: tape.constant(flat(eb.mu.lower())?), upper: tape.constant(flat(eb.mu.upper())?) };
    let ls =
        Bounds { lower: tape.constant(flat(eb.logsigma.lower())?), upper: tape.constant(flat(eb.logsigma.upper())?) };
    let (lo, hi) = kl_bounds_graph(mu, ls)?;
    Ok((lo.data()[0], hi.item()?))
}

/// Bounds on `z = μ + σ ⊙ noise` over the encoder box, for a fixed noise
/// vector of the same shape as `μ`.
pub fn latent_bounds(eb: &EncoderBounds, noise: &Tensor) -> Result<IntervalTensor> {
    if noise.shape() != eb.mu.lower().shape() {
        return Err(Error::dim("latent noise", noise.dims(), eb.mu.dims()));
    }
    let tape = Tape::new();
    let mu = Bounds::constant(&tape, &eb.mu);
    let ls = Bounds::constant(&tape, &eb.logsigma);
    latent_bounds_graph(mu, ls, tape.constant(noise.clone()))?.to_interval()
}

/// Decoder output bounds for latent bounds `[J]` or `[B, J]`.
pub fn decoder_bounds(model: &VaeModel, iv_z: &IntervalTensor) -> Result<IntervalTensor> {
    let j = model.latent_dim();
    let single = iv_z.dims() == [j];
    let reshape = |t: &Tensor| if single { t.reshape([1, j]) } else { Ok(t.clone()) };
    let tape = Tape::new();
    let vae = model.bind(&tape, false);
    let z = IntervalTensor::new(reshape(iv_z.lower())?, reshape(iv_z.upper())?)?;
    let out = vae.decode_bounds(Bounds::constant(&tape, &z))?.to_interval()?;
    if single {
        let (l, u) = out.into_parts();
        IntervalTensor::new(l.row(0)?, u.row(0)?)
    } else {
        Ok(out)
    }
}

/// Bounds on `‖x + δ - g‖²` over the clamped input box and the decoder box.
pub fn recon_sq_bounds(x: &Tensor, eps: f64, iv_g: &IntervalTensor) -> Result<(f64, f64)> {
    if x.shape() != iv_g.lower().shape() {
        return Err(Error::dim("recon_sq_bounds", x.dims(), iv_g.dims()));
    }
    let input = input_bounds(x, eps)?;
    let residual = IntervalTensor::new(
        input.lower().zip_map(iv_g.upper(), |a, b| a - b)?,
        input.upper().zip_map(iv_g.lower(), |a, b| a - b)?,
    )?;
    crate::interval::bound_sum_squares(&residual)
}

/// Certified ELBO lower bounds for a batch `[B, ...]` with noise `[B, J]`.
pub fn elbo_lower_bound_batch(model: &VaeModel, xs: &Tensor, eps: f64, noise: &Tensor) -> Result<Vec<BoundedElbo>> {
    let (xb, _) = model.as_batch(xs)?;
    let rows = xb.dims()[0];
    let noise = single_or_batch_noise(model, noise, rows)?;
    let tape = Tape::new();
    let vae = model.bind(&tape, false);
    let lb = lower_bound_graph(&vae, &xb, eps, &noise)?;
    let elbo = lb.elbo_lower.to_tensor();
    let (kl_hi, rl, rh) = (lb.kl_upper.to_tensor(), lb.recon_lower.to_tensor(), lb.recon_upper.to_tensor());
    let z = lb.z.to_interval()?;
    (0..rows)
        .map(|i| {
            Ok(BoundedElbo {
                elbo_lower: elbo.data()[i],
                kl: (lb.kl_lower.data()[i], kl_hi.data()[i]),
                recon_sq: (rl.data()[i], rh.data()[i]),
                z_bounds: IntervalTensor::new(z.lower().row(i)?, z.upper().row(i)?)?,
                noise: noise.row(i)?,
            })
        })
        .collect()
}

/// Certified ELBO lower bound for a single sample and noise vector `[J]`.
pub fn elbo_lower_bound(model: &VaeModel, x: &Tensor, eps: f64, noise: &Tensor) -> Result<BoundedElbo> {
    if x.dims() != model.data_shape() {
        return Err(Error::dim("elbo_lower_bound", x.dims(), model.data_shape()));
    }
    let mut out = elbo_lower_bound_batch(model, x, eps, noise)?;
    Ok(out.remove(0))
}

/// Every intermediate interval of the bound chain, aligned with
/// [`vae::trace`](crate::vae::trace): each trunk stage, `μ`, `log σ`, `z`,
/// then each decoder stage.
pub fn trace_bounds(model: &VaeModel, xs: &Tensor, eps: f64, noise: &Tensor) -> Result<Vec<IntervalTensor>> {
    let (xb, _) = model.as_batch(xs)?;
    let noise = single_or_batch_noise(model, noise, xb.dims()[0])?;
    let tape = Tape::new();
    let vae = model.bind(&tape, false);
    let mut out = Vec::new();
    let mut h = Bounds::constant(&tape, &input_bounds(&xb, eps)?);
    for l in &vae.trunk {
        h = l.forward_bounds(h)?;
        out.push(h.to_interval()?);
    }
    let (mu, ls) = (vae.mu_head.forward_bounds(h)?, vae.logsigma_head.forward_bounds(h)?);
    let mut z = latent_bounds_graph(mu, ls, tape.constant(noise))?;
    out.extend([mu.to_interval()?, ls.to_interval()?, z.to_interval()?]);
    for l in &vae.decoder {
        z = l.forward_bounds(z)?;
        out.push(z.to_interval()?);
    }
    Ok(out)
}

/// Outcome of [`certify`].
#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub certified: bool,
    /// Mean of the per-draw lower bounds.
    pub bound: f64,
    /// Sample standard deviation of the per-draw bounds (0 for one draw).
    pub spread: f64,
    pub per_draw: Vec<f64>,
}

/// Averages the certified bound over `n_noise` seeded noise draws and
/// compares it with `alpha`. The statement is per noise draw: for each draw
/// the bound holds for every admissible perturbation; the average over draws
/// is a Monte-Carlo estimate whose spread is reported.
pub fn certify(model: &VaeModel, x: &Tensor, eps: f64, alpha: f64, n_noise: usize, seed: u64) -> Result<Certificate> {
    if n_noise == 0 {
        return Err(Error::Config("certify needs at least one noise draw".into()));
    }
    if x.dims() != model.data_shape() {
        return Err(Error::dim("certify", x.dims(), model.data_shape()));
    }
    let noise = standard_normal(&mut seeded(seed), [n_noise, model.latent_dim()])?;
    let xs = Tensor::stack(&vec![x; n_noise])?;
    let per_draw: Vec<f64> =
        elbo_lower_bound_batch(model, &xs, eps, &noise)?.into_iter().map(|b| b.elbo_lower).collect();
    let (bound, spread) = mean_std(&per_draw);
    Ok(Certificate { certified: bound >= alpha, bound, spread, per_draw })
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::{self, Architecture, DEFAULT_SIGMA0};

    fn model(seed: u64) -> VaeModel {
        VaeModel::new(Architecture::dense(&[1, 2, 3], 3, &[7]), DEFAULT_SIGMA0, seed).unwrap()
    }

    fn x() -> Tensor {
        Tensor::from_vec([1, 2, 3], vec![0.1, 0.9, 0.5, 0.0, 0.33, 1.0]).unwrap()
    }

    fn iv(lo: &[f64], hi: &[f64]) -> IntervalTensor {
        IntervalTensor::new(Tensor::vector(lo), Tensor::vector(hi)).unwrap()
    }

    #[test]
    fn input_bounds_examples() {
        let x0 = Tensor::vector(&[0.5]);
        assert_eq!(input_bounds(&x0, 0.0).unwrap(), IntervalTensor::point(x0.clone()));
        let b = input_bounds(&x0, 0.1).unwrap();
        assert!((b.lower().data()[0] - 0.4).abs() < 1e-15 && (b.upper().data()[0] - 0.6).abs() < 1e-15);
        let b = input_bounds(&Tensor::vector(&[0.05]), 0.1).unwrap();
        assert_eq!(b.lower().data(), &[0.0]);
        assert!((b.upper().data()[0] - 0.15).abs() < 1e-15);
        assert!(matches!(input_bounds(&x0, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_bounds_degenerate_at_zero_radius() {
        let m = model(0);
        let eb = encoder_bounds(&m, &input_bounds(&x(), 0.0).unwrap()).unwrap();
        let (mu, ls) = vae::encode(&m, &x()).unwrap();
        for (b, exact) in [(&eb.mu, &mu), (&eb.logsigma, &ls)] {
            for ((l, u), e) in b.lower().data().iter().zip(b.upper().data()).zip(exact.data()) {
                assert!((l - e).abs() < 1e-12 && (u - e).abs() < 1e-12);
            }
        }
        assert!(eb.sigma.lower().data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn kl_bounds_examples() {
        let eb = |mu: IntervalTensor, sig: (f64, f64)| EncoderBounds {
            mu,
            logsigma: iv(&[sig.0.ln()], &[sig.1.ln()]),
            sigma: iv(&[sig.0], &[sig.1]),
        };
        let (lo, hi) = kl_bounds(&eb(iv(&[0.0], &[0.0]), (1.0, 1.0))).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
        let (lo, hi) = kl_bounds(&eb(iv(&[-0.5], &[0.5]), (1.0, 1.0))).unwrap();
        assert!(lo.abs() < 1e-15 && (hi - 0.125).abs() < 1e-15);
        // σ ∈ [0.8, 1.2]: interior minimum at σ = 1, maximum at σ = 0.8
        let (lo, hi) = kl_bounds(&eb(iv(&[0.0], &[0.0]), (0.8, 1.2))).unwrap();
        let kl = |s: f64| 0.5 * (s * s - (s * s).ln() - 1.0);
        assert!(lo.abs() < 1e-15);
        assert!((hi - kl(0.8)).abs() < 1e-12 && kl(0.8) > kl(1.2));
    }

    #[test]
    fn latent_bounds_examples() {
        let eb =
            EncoderBounds { mu: iv(&[0.0], &[0.0]), logsigma: iv(&[0.0], &[2f64.ln()]), sigma: iv(&[1.0], &[2.0]) };
        let z = latent_bounds(&eb, &Tensor::vector(&[0.0])).unwrap();
        assert_eq!(z, eb.mu);
        let z = latent_bounds(&eb, &Tensor::vector(&[-1.0])).unwrap();
        assert!((z.lower().data()[0] + 2.0).abs() < 1e-15);
        assert!((z.upper().data()[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn decoder_bounds_degenerate_and_in_unit_range() {
        let m = model(1);
        let z = Tensor::vector(&[0.3, -1.2, 0.8]);
        let out = decoder_bounds(&m, &IntervalTensor::point(z.clone())).unwrap();
        let exact = vae::decode(&m, &z).unwrap();
        assert!(out.lower().zip_map(&exact, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-12);
        let wide = iv(&[-3.0, -3.0, -3.0], &[3.0, 3.0, 3.0]);
        let out = decoder_bounds(&m, &wide).unwrap();
        assert!(out.lower().data().iter().all(|&v| v >= 0.0));
        assert!(out.upper().data().iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn recon_sq_bounds_examples() {
        let x0 = Tensor::vector(&[0.5]);
        let (lo, hi) = recon_sq_bounds(&x0, 0.1, &iv(&[0.2], &[0.3])).unwrap();
        assert!((lo - 0.01).abs() < 1e-12 && (hi - 0.16).abs() < 1e-12);
        let (lo, hi) = recon_sq_bounds(&x0, 0.1, &iv(&[0.45], &[0.65])).unwrap();
        assert!(lo == 0.0 && (hi - 0.0625).abs() < 1e-12);
        assert_eq!(recon_sq_bounds(&x0, 0.0, &iv(&[0.5], &[0.5])).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn zero_radius_bound_equals_elbo() {
        let m = model(2);
        let noise = Tensor::vector(&[0.4, -1.3, 0.2]);
        let b = elbo_lower_bound(&m, &x(), 0.0, &noise).unwrap();
        let e = vae::elbo(&m, &x(), &noise).unwrap();
        assert!((b.elbo_lower - e.elbo).abs() < 1e-9);
        assert!((b.kl.0 - e.kl).abs() < 1e-9 && (b.kl.1 - e.kl).abs() < 1e-9);
        assert!((b.recon_sq.0 - e.recon_sq).abs() < 1e-9 && (b.recon_sq.1 - e.recon_sq).abs() < 1e-9);
    }

    #[test]
    fn bound_is_anti_monotone_in_radius() {
        let m = model(3);
        let noise = Tensor::vector(&[1.0, 0.5, -0.7]);
        let small = elbo_lower_bound(&m, &x(), 0.01, &noise).unwrap().elbo_lower;
        let large = elbo_lower_bound(&m, &x(), 0.1, &noise).unwrap().elbo_lower;
        assert!(large <= small);
    }

    #[test]
    fn certify_examples() {
        let m = model(4);
        let c0 = certify(&m, &x(), 0.0, f64::NEG_INFINITY, 4, 7).unwrap();
        let noise = standard_normal(&mut seeded(7), [4, 3]).unwrap();
        let elbos = vae::elbo_batch(&m, &Tensor::stack(&[&x(); 4]).unwrap(), &noise).unwrap();
        let mean = elbos.iter().map(|t| t.elbo).sum::<f64>() / 4.0;
        assert!((c0.bound - mean).abs() < 1e-9);
        assert!(certify(&m, &x(), 0.0, mean - 1.0, 4, 7).unwrap().certified);
        assert!(!certify(&m, &x(), 0.0, f64::INFINITY, 4, 7).unwrap().certified);
        assert!(certify(&m, &x(), 0.0, 0.0, 0, 7).is_err());
        let mut prev = c0.bound;
        for eps in [0.01, 0.05, 0.1, 0.2] {
            let b = certify(&m, &x(), eps, 0.0, 4, 7).unwrap().bound;
            assert!(b <= prev);
            prev = b;
        }
    }
}
