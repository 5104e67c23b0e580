//! Interval bound propagation.
//!
//! [`Bounds`] is a pair of tape-recorded tensors holding elementwise lower
//! and upper bounds, so every propagated bound stays differentiable with
//! respect to the network parameters. [`IntervalTensor`] is the plain-value
//! snapshot used at API boundaries and in soundness checks.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, UnaryKind, Var};

/// Absolute slack used by [`IntervalTensor::contains`] to absorb round-off.
pub const CONTAINMENT_SLACK: f64 = 1e-9;

/// Elementwise `[lower, upper]` box with `lower <= upper`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTensor {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalTensor {
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::dim("interval", lower.dims(), upper.dims()));
        }
        if let Some(i) =
            lower.data().iter().zip(upper.data()).position(|(l, u)| l.partial_cmp(u).is_none_or(|o| o.is_gt()))
        {
            return Err(Error::Contract(format!(
                "interval element {i} has lower {} > upper {}",
                lower.data()[i],
                upper.data()[i]
            )));
        }
        Ok(IntervalTensor { lower, upper })
    }

    /// Degenerate interval `[t, t]`.
    pub fn point(t: Tensor) -> Self {
        IntervalTensor { lower: t.clone(), upper: t }
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn dims(&self) -> &[usize] {
        self.lower.dims()
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.lower, self.upper)
    }

    /// `lower <= t <= upper` elementwise, up to [`CONTAINMENT_SLACK`].
    pub fn contains(&self, t: &Tensor) -> Result<bool> {
        if t.shape() != self.lower.shape() {
            return Err(Error::dim("contains", self.dims(), t.dims()));
        }
        Ok(self
            .lower
            .data()
            .iter()
            .zip(self.upper.data())
            .zip(t.data())
            .all(|((&l, &u), &v)| v >= l - CONTAINMENT_SLACK && v <= u + CONTAINMENT_SLACK))
    }

    /// Whether `inner` lies inside `self`, up to [`CONTAINMENT_SLACK`].
    pub fn encloses(&self, inner: &IntervalTensor) -> Result<bool> {
        Ok(self.contains(&inner.lower)? && self.contains(&inner.upper)?)
    }

    /// Largest elementwise distance between the bounds.
    pub fn max_width(&self) -> f64 {
        self.lower.data().iter().zip(self.upper.data()).fold(0.0, |m, (l, u)| m.max(u - l))
    }
}

/// Tape-recorded interval bounds.
#[derive(Clone, Copy, Debug)]
pub struct Bounds<'t> {
    pub lower: Var<'t>,
    pub upper: Var<'t>,
}

impl<'t> Bounds<'t> {
    /// Records a fixed (non-differentiable) interval on `tape`.
    pub fn constant(tape: &'t Tape, iv: &IntervalTensor) -> Self {
        Bounds { lower: tape.constant(iv.lower.clone()), upper: tape.constant(iv.upper.clone()) }
    }

    /// Degenerate bounds around a single recorded value.
    pub fn point(v: Var<'t>) -> Self {
        Bounds { lower: v, upper: v }
    }

    pub fn to_interval(&self) -> Result<IntervalTensor> {
        IntervalTensor::new(self.lower.to_tensor(), self.upper.to_tensor())
    }

    /// Linear layer with `W = W₊ + W₋`:
    /// `upper = W₊·u + W₋·l + b`, `lower = W₊·l + W₋·u + b`.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Self> {
        let tape = w.tape();
        let (w_pos, w_neg) = split_signs(w)?;
        let zero = tape.constant(Tensor::zeros(b.dims())?);
        let upper = self.upper.affine(w_pos, b)?.add(self.lower.affine(w_neg, zero)?)?;
        let lower = self.lower.affine(w_pos, b)?.add(self.upper.affine(w_neg, zero)?)?;
        Ok(Bounds { lower, upper })
    }

    /// Convolution, bounded the same way as [`affine`](Self::affine) with the
    /// kernels split into positive and negative parts.
    pub fn conv2d(self, kernels: Var<'t>, bias: Var<'t>, stride: usize, padding: usize) -> Result<Self> {
        let tape = kernels.tape();
        let (k_pos, k_neg) = split_signs(kernels)?;
        let zero = tape.constant(Tensor::zeros(bias.dims())?);
        let upper =
            self.upper.conv2d(k_pos, bias, stride, padding)?.add(self.lower.conv2d(k_neg, zero, stride, padding)?)?;
        let lower =
            self.lower.conv2d(k_pos, bias, stride, padding)?.add(self.upper.conv2d(k_neg, zero, stride, padding)?)?;
        Ok(Bounds { lower, upper })
    }

    /// Elementwise monotone function. Non-decreasing functions map endpoints
    /// to endpoints; non-increasing ones swap them.
    pub fn monotonic(self, kind: UnaryKind) -> Result<Self> {
        match kind {
            UnaryKind::Relu | UnaryKind::Sigmoid | UnaryKind::Exp | UnaryKind::Log => {
                Ok(Bounds { lower: self.lower.unary(kind)?, upper: self.upper.unary(kind)? })
            }
            UnaryKind::Negate => Ok(Bounds { lower: self.upper.neg(), upper: self.lower.neg() }),
            UnaryKind::Square => Err(Error::Contract("square is not monotone; use Bounds::square".into())),
        }
    }

    /// Elementwise `v²`. The upper bound is the larger endpoint square; the
    /// lower bound is 0 where the interval straddles 0 and the smaller
    /// endpoint square otherwise, computed as `relu(l)² + relu(-u)²`.
    pub fn square(self) -> Result<Self> {
        let upper = self.lower.square().maximum(self.upper.square())?;
        let lower = self.lower.relu().square().add(self.upper.neg().relu().square())?;
        Ok(Bounds { lower, upper })
    }

    /// Bounds on `Σ v_i²` as a pair of `[1]` tensors.
    pub fn sum_squares(self) -> Result<(Var<'t>, Var<'t>)> {
        let sq = self.square()?;
        Ok((sq.lower.sum(), sq.upper.sum()))
    }

    /// Per-row bounds on `Σ v_i²` for batched `[B, ...]` bounds.
    pub fn sum_squares_rows(self) -> Result<(Var<'t>, Var<'t>)> {
        let sq = self.square()?;
        Ok((sq.lower.sum_rows()?, sq.upper.sum_rows()?))
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        Ok(Bounds { lower: self.lower.reshape(dims.clone())?, upper: self.upper.reshape(dims)? })
    }

    /// Nearest-neighbour upsampling copies values, so bounds carry over.
    pub fn upsample(self, factor: usize) -> Result<Self> {
        Ok(Bounds { lower: self.lower.upsample(factor)?, upper: self.upper.upsample(factor)? })
    }
}

/// `(max(W, 0), min(W, 0))`.
fn split_signs(w: Var<'_>) -> Result<(Var<'_>, Var<'_>)> {
    let pos = w.relu();
    let neg = w.sub(pos)?;
    Ok((pos, neg))
}

pub fn bound_affine(w: &Tensor, b: &Tensor, iv: &IntervalTensor) -> Result<IntervalTensor> {
    let tape = Tape::new();
    let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
    Bounds::constant(&tape, iv).affine(w, b)?.to_interval()
}

pub fn bound_conv2d(
    kernels: &Tensor,
    bias: &Tensor,
    iv: &IntervalTensor,
    stride: usize,
    padding: usize,
) -> Result<IntervalTensor> {
    let tape = Tape::new();
    let (k, b) = (tape.constant(kernels.clone()), tape.constant(bias.clone()));
    Bounds::constant(&tape, iv).conv2d(k, b, stride, padding)?.to_interval()
}

pub fn bound_monotonic(kind: UnaryKind, iv: &IntervalTensor) -> Result<IntervalTensor> {
    let tape = Tape::new();
    Bounds::constant(&tape, iv).monotonic(kind)?.to_interval()
}

pub fn bound_square(iv: &IntervalTensor) -> Result<IntervalTensor> {
    let tape = Tape::new();
    Bounds::constant(&tape, iv).square()?.to_interval()
}

/// `(lo, hi)` with `lo <= ‖v‖² <= hi` for every `v` in `iv`.
pub fn bound_sum_squares(iv: &IntervalTensor) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let (lo, hi) = Bounds::constant(&tape, iv).sum_squares()?;
    Ok((lo.item()?, hi.item()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(lo: &[f64], hi: &[f64]) -> IntervalTensor {
        IntervalTensor::new(Tensor::vector(lo), Tensor::vector(hi)).unwrap()
    }

    #[test]
    fn new_rejects_inverted() {
        assert!(IntervalTensor::new(Tensor::vector(&[1.0]), Tensor::vector(&[0.0])).is_err());
        assert!(IntervalTensor::new(Tensor::vector(&[1.0]), Tensor::vector(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn affine_identity_keeps_interval() {
        let x = iv(&[-1.0, 0.5], &[2.0, 0.75]);
        let out = bound_affine(&Tensor::eye(2).unwrap(), &Tensor::zeros([2]).unwrap(), &x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn affine_matches_corner_enumeration() {
        let w = Tensor::from_vec([1, 2], vec![2.0, -1.0]).unwrap();
        let out = bound_affine(&w, &Tensor::zeros([1]).unwrap(), &iv(&[0.0, -1.0], &[1.0, 1.0])).unwrap();
        // corners: (0,-1)->1, (0,1)->-1, (1,-1)->3, (1,1)->1
        assert_eq!(out.lower().data(), &[-1.0]);
        assert_eq!(out.upper().data(), &[3.0]);
    }

    #[test]
    fn affine_degenerate_is_exact() {
        let w = Tensor::from_vec([2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7]).unwrap();
        let b = Tensor::vector(&[0.25, -0.5]);
        let v = Tensor::vector(&[0.4, -0.9, 1.3]);
        let out = bound_affine(&w, &b, &IntervalTensor::point(v.clone())).unwrap();
        let tape = Tape::new();
        let exact = tape.constant(v).affine(tape.constant(w), tape.constant(b)).unwrap().to_tensor();
        for ((l, u), e) in out.lower().data().iter().zip(out.upper().data()).zip(exact.data()) {
            assert!((l - e).abs() < 1e-12 && (u - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_with_nonnegative_kernel_maps_endpoints() {
        let k = Tensor::from_vec([1, 1, 2, 2], vec![0.5, 1.0, 0.0, 2.0]).unwrap();
        let b = Tensor::vector(&[0.1]);
        let lo = Tensor::from_vec([1, 3, 3], (0..9).map(|i| i as f64 * 0.1).collect()).unwrap();
        let hi = lo.map(|v| v + 0.3);
        let out = bound_conv2d(&k, &b, &IntervalTensor::new(lo.clone(), hi.clone()).unwrap(), 1, 0).unwrap();
        let tape = Tape::new();
        let conv = |x: Tensor| {
            tape.constant(x).conv2d(tape.constant(k.clone()), tape.constant(b.clone()), 1, 0).unwrap().to_tensor()
        };
        assert_eq!(out.lower(), &conv(lo));
        assert_eq!(out.upper(), &conv(hi));
    }

    #[test]
    fn monotonic_examples() {
        let out = bound_monotonic(UnaryKind::Relu, &iv(&[-1.0], &[2.0])).unwrap();
        assert_eq!((out.lower().data(), out.upper().data()), (&[0.0][..], &[2.0][..]));
        let out = bound_monotonic(UnaryKind::Sigmoid, &iv(&[0.0], &[0.0])).unwrap();
        assert_eq!((out.lower().data(), out.upper().data()), (&[0.5][..], &[0.5][..]));
        let out = bound_monotonic(UnaryKind::Negate, &iv(&[-1.0], &[2.0])).unwrap();
        assert_eq!((out.lower().data(), out.upper().data()), (&[-2.0][..], &[1.0][..]));
    }

    #[test]
    fn monotonic_log_domain() {
        assert!(matches!(bound_monotonic(UnaryKind::Log, &iv(&[0.0], &[1.0])), Err(Error::Domain { .. })));
        assert!(bound_monotonic(UnaryKind::Square, &iv(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn exp_contains_grid() {
        let out = bound_monotonic(UnaryKind::Exp, &iv(&[-1.0], &[1.0])).unwrap();
        for i in 0..100 {
            let x = -1.0 + 2.0 * i as f64 / 99.0;
            assert!(out.contains(&Tensor::vector(&[x.exp()])).unwrap());
        }
    }

    #[test]
    fn square_examples() {
        let out = bound_square(&iv(&[1.0], &[2.0])).unwrap();
        assert_eq!((out.lower().data(), out.upper().data()), (&[1.0][..], &[4.0][..]));
        let out = bound_square(&iv(&[-1.0], &[2.0])).unwrap();
        assert_eq!((out.lower().data(), out.upper().data()), (&[0.0][..], &[4.0][..]));
        let out = bound_square(&iv(&[-0.3], &[-0.3])).unwrap();
        let c2 = (-0.3f64) * (-0.3);
        assert_eq!((out.lower().data(), out.upper().data()), (&[c2][..], &[c2][..]));
    }

    #[test]
    fn sum_squares_examples() {
        assert_eq!(bound_sum_squares(&iv(&[0.0, 0.0], &[0.0, 0.0])).unwrap(), (0.0, 0.0));
        assert_eq!(bound_sum_squares(&iv(&[1.0, -1.0], &[2.0, 2.0])).unwrap(), (1.0, 8.0));
    }

    #[test]
    fn contains_examples() {
        let x = iv(&[0.0], &[1.0]);
        assert!(x.contains(&Tensor::vector(&[0.5])).unwrap());
        assert!(x.contains(&Tensor::vector(&[1.0 + 1e-12])).unwrap());
        assert!(!x.contains(&Tensor::vector(&[1.1])).unwrap());
        assert!(x.contains(&Tensor::vector(&[0.5, 0.5])).is_err());
    }
}
