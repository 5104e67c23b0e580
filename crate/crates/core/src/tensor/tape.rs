use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{gemm, ConvGeometry, MatRef};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Elementwise unary operations understood by the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Square,
    Negate,
}

impl UnaryKind {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Square => v * v,
            UnaryKind::Negate => -v,
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Affine { w: usize, b: usize, x: usize, rows: usize, n_in: usize, n_out: usize },
    Conv { k: usize, b: usize, x: usize, geom: ConvGeometry, batch: usize },
    Unary { kind: UnaryKind, x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Max { a: usize, b: usize },
    Min { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    AddScalar { x: usize },
    Sum { x: usize },
    SumRows { x: usize, rows: usize },
    SumSquares { x: usize },
    Reshape { x: usize },
    Upsample { x: usize, factor: usize, planes: usize, h: usize, w: usize },
}

impl Op {
    fn inputs(&self) -> impl Iterator<Item = usize> {
        let v: [Option<usize>; 3] = match *self {
            Op::Leaf => [None, None, None],
            Op::Affine { w, b, x, .. } | Op::Conv { k: w, b, x, .. } => [Some(w), Some(b), Some(x)],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Max { a, b } | Op::Min { a, b } => {
                [Some(a), Some(b), None]
            }
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Sum { x }
            | Op::SumRows { x, .. }
            | Op::SumSquares { x }
            | Op::Reshape { x }
            | Op::Upsample { x, .. } => [Some(x), None, None],
        };
        v.into_iter().flatten()
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in topological order for reverse-mode differentiation.
///
/// A tape is single-threaded; use one tape per independent computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.dims())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (model parameter or attacked input).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradient contributions.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().any(|i| nodes[i].requires_grad);
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Reverse pass from a single-element `root`.
    ///
    /// Visits nodes in strict reverse recording order. Gradients are retained
    /// for leaves only; a leaf that `root` does not depend on gets zeros. The
    /// tape is not modified, so repeated calls give identical results.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Contract("backward root belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if root_node.requires_grad {
            grads[root.id] = Some(Tensor::full(root_node.value.dims().to_vec(), 1.0)?);
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
        }
        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (n.op, g) {
                (Op::Leaf, Some(g)) => Some(g),
                (Op::Leaf, None) => Some(Tensor::zeros_like(&n.value)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf. Panics if `v` is not a leaf of the
    /// tape these gradients came from.
    pub fn wrt(&self, v: Var<'_>) -> &Tensor {
        self.grads.get(v.id).and_then(Option::as_ref).expect("gradient requested for a non-leaf node")
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.data_mut().iter_mut().zip(contrib.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn elementwise(shape: &Shape, f: impl Fn(usize) -> f64, n: usize) -> Tensor {
    Tensor::from_parts(shape.clone(), (0..n).map(f).collect())
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let req = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match node.op {
        Op::Leaf => {}
        Op::Affine { w, b, x, rows, n_in, n_out } => {
            let wv = val(w).data();
            let xv = val(x).data();
            let g_mat = MatRef::new(gd, rows, n_out);
            if req(x) {
                let mut dx = vec![0.0; rows * n_in];
                gemm(g_mat, MatRef::new(wv, n_out, n_in), 0.0, &mut dx);
                accumulate(nodes, grads, x, Tensor::from_parts(val(x).shape().clone(), dx));
            }
            if req(w) {
                let mut dw = vec![0.0; n_out * n_in];
                gemm(g_mat.t(), MatRef::new(xv, rows, n_in), 0.0, &mut dw);
                accumulate(nodes, grads, w, Tensor::from_parts(val(w).shape().clone(), dw));
            }
            if req(b) {
                let mut db = vec![0.0; n_out];
                for row in gd.chunks(n_out) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                accumulate(nodes, grads, b, Tensor::from_parts(val(b).shape().clone(), db));
            }
        }
        Op::Conv { k, b, x, geom, batch } => {
            let (oh, ow) = geom.output_hw().expect("validated geometry");
            let n_out = oh * ow;
            let out_len = geom.out_channels * n_out;
            let patch = geom.patch_len();
            let kv = val(k).data();
            let xv = val(x).data();
            let mut dk = req(k).then(|| vec![0.0; kv.len()]);
            let mut dx = req(x).then(|| vec![0.0; xv.len()]);
            let mut db = req(b).then(|| vec![0.0; geom.out_channels]);
            let mut cols = vec![0.0; patch * n_out];
            for bi in 0..batch {
                let gy = &gd[bi * out_len..(bi + 1) * out_len];
                if let Some(db) = db.as_mut() {
                    for (o, plane) in gy.chunks(n_out).enumerate() {
                        db[o] += plane.iter().sum::<f64>();
                    }
                }
                let gy_mat = MatRef::new(gy, geom.out_channels, n_out);
                if let Some(dk) = dk.as_mut() {
                    geom.im2col(&xv[bi * geom.in_len()..(bi + 1) * geom.in_len()], &mut cols);
                    gemm(gy_mat, MatRef::new(&cols, patch, n_out).t(), 1.0, dk);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(MatRef::new(kv, geom.out_channels, patch).t(), gy_mat, 0.0, &mut cols);
                    geom.col2im(&cols, &mut dx[bi * geom.in_len()..(bi + 1) * geom.in_len()]);
                }
            }
            if let Some(dk) = dk {
                accumulate(nodes, grads, k, Tensor::from_parts(val(k).shape().clone(), dk));
            }
            if let Some(dx) = dx {
                accumulate(nodes, grads, x, Tensor::from_parts(val(x).shape().clone(), dx));
            }
            if let Some(db) = db {
                accumulate(nodes, grads, b, Tensor::from_parts(val(b).shape().clone(), db));
            }
        }
        Op::Unary { kind, x } => {
            if !req(x) {
                return;
            }
            let xv = val(x).data();
            let yv = node.value.data();
            let n = gd.len();
            let shape = val(x).shape();
            let d = match kind {
                UnaryKind::Relu => elementwise(shape, |i| if xv[i] > 0.0 { gd[i] } else { 0.0 }, n),
                UnaryKind::Sigmoid => elementwise(shape, |i| gd[i] * yv[i] * (1.0 - yv[i]), n),
                UnaryKind::Exp => elementwise(shape, |i| gd[i] * yv[i], n),
                UnaryKind::Log => elementwise(shape, |i| gd[i] / xv[i], n),
                UnaryKind::Square => elementwise(shape, |i| 2.0 * xv[i] * gd[i], n),
                UnaryKind::Negate => elementwise(shape, |i| -gd[i], n),
            };
            accumulate(nodes, grads, x, d);
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.clone());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, a, g.clone());
            if req(b) {
                accumulate(nodes, grads, b, g.map(|v| -v));
            }
        }
        Op::Mul { a, b } => {
            if req(a) {
                accumulate(nodes, grads, a, g.zip_map(val(b), |g, v| g * v).expect("shape"));
            }
            if req(b) {
                accumulate(nodes, grads, b, g.zip_map(val(a), |g, v| g * v).expect("shape"));
            }
        }
        // Ties route the gradient to the first argument.
        Op::Max { a, b } | Op::Min { a, b } => {
            let is_max = matches!(node.op, Op::Max { .. });
            let av = val(a).data();
            let bv = val(b).data();
            let pick_a = |i: usize| if is_max { av[i] >= bv[i] } else { av[i] <= bv[i] };
            let n = gd.len();
            let shape = node.value.shape();
            if req(a) {
                let d = elementwise(shape, |i| if pick_a(i) { gd[i] } else { 0.0 }, n);
                accumulate(nodes, grads, a, d);
            }
            if req(b) {
                let d = elementwise(shape, |i| if pick_a(i) { 0.0 } else { gd[i] }, n);
                accumulate(nodes, grads, b, d);
            }
        }
        Op::Scale { x, factor } => {
            if req(x) {
                accumulate(nodes, grads, x, g.map(|v| v * factor));
            }
        }
        Op::AddScalar { x } => accumulate(nodes, grads, x, g.clone()),
        Op::Sum { x } => {
            if req(x) {
                let xs = val(x);
                accumulate(nodes, grads, x, Tensor::from_parts(xs.shape().clone(), vec![gd[0]; xs.numel()]));
            }
        }
        Op::SumRows { x, rows } => {
            if req(x) {
                let xs = val(x);
                let per = xs.numel() / rows;
                let d = elementwise(xs.shape(), |i| gd[i / per], xs.numel());
                accumulate(nodes, grads, x, d);
            }
        }
        Op::SumSquares { x } => {
            if req(x) {
                let xs = val(x);
                accumulate(nodes, grads, x, xs.map(|v| 2.0 * v * gd[0]));
            }
        }
        Op::Reshape { x } => {
            if req(x) {
                let d = Tensor::from_parts(val(x).shape().clone(), gd.to_vec());
                accumulate(nodes, grads, x, d);
            }
        }
        Op::Upsample { x, factor, planes, h, w } => {
            if req(x) {
                let (oh, ow) = (h * factor, w * factor);
                let mut d = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            d[p * h * w + (i / factor) * w + j / factor] += gd[p * oh * ow + i * ow + j];
                        }
                    }
                }
                accumulate(nodes, grads, x, Tensor::from_parts(val(x).shape().clone(), d));
            }
        }
    }
}

// Binary ops return `Result` for shape checks, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the forward value. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().dims().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    /// `W·v + b` for `v` of shape `[n]` or a batch `[B, n]`; `W` is `[m, n]`, `b` is `[m]`.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w)?;
        self.same_tape(&b)?;
        let (value, op) = {
            let (xv, wv, bv) = (self.value(), w.value(), b.value());
            let wd = wv.dims();
            if wd.len() != 2 {
                return Err(Error::dim("affine", wd, xv.dims()));
            }
            let (n_out, n_in) = (wd[0], wd[1]);
            let (rows, out_dims) = match xv.dims() {
                [n] if *n == n_in => (1, vec![n_out]),
                [rows, n] if *n == n_in => (*rows, vec![*rows, n_out]),
                other => return Err(Error::dim("affine", wd, other)),
            };
            if bv.dims() != [n_out] {
                return Err(Error::dim("affine bias", bv.dims(), &[n_out]));
            }
            let mut out = Vec::with_capacity(rows * n_out);
            for _ in 0..rows {
                out.extend_from_slice(bv.data());
            }
            gemm(MatRef::new(xv.data(), rows, n_in), MatRef::new(wv.data(), n_out, n_in).t(), 1.0, &mut out);
            let value = Tensor::from_parts(Shape(out_dims), out);
            let op = Op::Affine { w: w.id, b: b.id, x: self.id, rows, n_in, n_out };
            (value, op)
        };
        Ok(self.tape.push(value, op))
    }

    /// Cross-correlation of `[B, C, H, W]` (or `[C, H, W]`) input with
    /// `[O, C, kh, kw]` kernels plus a per-channel bias `[O]`.
    pub fn conv2d(self, kernels: Var<'t>, bias: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&kernels)?;
        self.same_tape(&bias)?;
        let (value, op) = {
            let (xv, kv, bv) = (self.value(), kernels.value(), bias.value());
            let kd = kv.dims();
            let (batch, c, h, w, batched) = match *xv.dims() {
                [c, h, w] => (1, c, h, w, false),
                [b, c, h, w] => (b, c, h, w, true),
                _ => return Err(Error::dim("conv2d", xv.dims(), kd)),
            };
            if kd.len() != 4 || kd[1] != c {
                return Err(Error::dim("conv2d", xv.dims(), kd));
            }
            if bv.dims() != [kd[0]] {
                return Err(Error::dim("conv2d bias", bv.dims(), &[kd[0]]));
            }
            let geom = ConvGeometry {
                in_channels: c,
                in_h: h,
                in_w: w,
                out_channels: kd[0],
                kernel_h: kd[2],
                kernel_w: kd[3],
                stride,
                padding,
            };
            let Some((oh, ow)) = geom.output_hw() else {
                return Err(Error::dim("conv2d kernel exceeds padded input", xv.dims(), kd));
            };
            let n_out = oh * ow;
            let patch = geom.patch_len();
            let out_len = geom.out_channels * n_out;
            let mut out = vec![0.0; batch * out_len];
            let mut cols = vec![0.0; patch * n_out];
            for bi in 0..batch {
                geom.im2col(&xv.data()[bi * geom.in_len()..(bi + 1) * geom.in_len()], &mut cols);
                let dst = &mut out[bi * out_len..(bi + 1) * out_len];
                for (o, plane) in dst.chunks_mut(n_out).enumerate() {
                    plane.fill(bv.data()[o]);
                }
                gemm(MatRef::new(kv.data(), geom.out_channels, patch), MatRef::new(&cols, patch, n_out), 1.0, dst);
            }
            let dims = if batched { vec![batch, geom.out_channels, oh, ow] } else { vec![geom.out_channels, oh, ow] };
            let op = Op::Conv { k: kernels.id, b: bias.id, x: self.id, geom, batch };
            (Tensor::from_parts(Shape(dims), out), op)
        };
        Ok(self.tape.push(value, op))
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        let value = {
            let xv = self.value();
            if kind == UnaryKind::Log {
                if let Some((index, &value)) =
                    xv.data().iter().enumerate().find(|(_, &v)| v.partial_cmp(&0.0).is_none_or(|o| o.is_le()))
                {
                    return Err(Error::Domain { op: "log", index, value });
                }
            }
            xv.map(|v| kind.apply(v))
        };
        Ok(self.tape.push(value, Op::Unary { kind, x: self.id }))
    }

    fn unary_infallible(self, kind: UnaryKind) -> Var<'t> {
        self.unary(kind).expect("only log can fail")
    }

    pub fn relu(self) -> Var<'t> {
        self.unary_infallible(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary_infallible(UnaryKind::Sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_infallible(UnaryKind::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Log)
    }

    pub fn square(self) -> Var<'t> {
        self.unary_infallible(UnaryKind::Square)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary_infallible(UnaryKind::Negate)
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::dim(name, a.dims(), b.dims()));
            }
            a.zip_map(&b, f)?
        };
        Ok(self.tape.push(value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    /// Elementwise maximum; at ties the gradient flows to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "maximum", |a, b| if a >= b { a } else { b }, Op::Max { a: self.id, b: other.id })
    }

    /// Elementwise minimum; at ties the gradient flows to `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "minimum", |a, b| if a <= b { a } else { b }, Op::Min { a: self.id, b: other.id })
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let value = self.value().map(|v| v * factor);
        self.tape.push(value, Op::Scale { x: self.id, factor })
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v + c);
        self.tape.push(value, Op::AddScalar { x: self.id })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push(value, Op::Sum { x: self.id })
    }

    /// Per-row sums of a `[B, ...]` tensor, giving `[B]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let (value, rows) = {
            let xv = self.value();
            if xv.shape().rank() < 2 {
                return Err(Error::dim("sum_rows", xv.dims(), &[0, 0]));
            }
            let rows = xv.dims()[0];
            let per = xv.numel() / rows;
            let sums: Vec<f64> = xv.data().chunks(per).map(|c| c.iter().sum()).collect();
            (Tensor::from_parts(Shape(vec![rows]), sums), rows)
        };
        Ok(self.tape.push(value, Op::SumRows { x: self.id, rows }))
    }

    /// `Σ v_i²` as a `[1]` tensor.
    pub fn sum_squares(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().data().iter().map(|v| v * v).sum());
        self.tape.push(value, Op::SumSquares { x: self.id })
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshape(dims)?;
        Ok(self.tape.push(value, Op::Reshape { x: self.id }))
    }

    /// Nearest-neighbour spatial upsampling of `[B, C, H, W]` by an integer factor.
    pub fn upsample(self, factor: usize) -> Result<Var<'t>> {
        let (value, op) = {
            let xv = self.value();
            let [b, c, h, w] = *xv.dims() else {
                return Err(Error::dim("upsample", xv.dims(), &[0, 0, 0, 0]));
            };
            if factor == 0 {
                return Err(Error::Config("upsample factor must be positive".into()));
            }
            let (oh, ow) = (h * factor, w * factor);
            let planes = b * c;
            let src = xv.data();
            let mut out = vec![0.0; planes * oh * ow];
            for p in 0..planes {
                for i in 0..oh {
                    for j in 0..ow {
                        out[p * oh * ow + i * ow + j] = src[p * h * w + (i / factor) * w + j / factor];
                    }
                }
            }
            let op = Op::Upsample { x: self.id, factor, planes, h, w };
            (Tensor::from_parts(Shape(vec![b, c, oh, ow]), out), op)
        };
        Ok(self.tape.push(value, op))
    }
}
