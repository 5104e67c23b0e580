use crate::error::{Error, Result};
use crate::interval::Bounds;
use crate::rng::{uniform, SeededRng};
use crate::tensor::{Tape, Tensor, UnaryKind, Var};

/// One network stage. Shapes below are per sample; the batch axis is implicit.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `weight: [out, in]`, `bias: [out]` on `[in]` inputs.
    Affine {
        weight: Tensor,
        bias: Tensor,
    },
    /// `kernels: [out_c, in_c, kh, kw]`, `bias: [out_c]` on `[in_c, H, W]` inputs.
    Conv2d {
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    Reshape {
        dims: Vec<usize>,
    },
    Upsample {
        factor: usize,
    },
}

impl Layer {
    /// Uniform `±1/√fan_in` initialization, as common frameworks do.
    pub fn affine(rng: &mut SeededRng, n_in: usize, n_out: usize) -> Result<Self> {
        let a = 1.0 / (n_in as f64).sqrt();
        Ok(Layer::Affine { weight: uniform(rng, [n_out, n_in], -a, a)?, bias: uniform(rng, [n_out], -a, a)? })
    }

    pub fn conv(
        rng: &mut SeededRng,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let a = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
        Ok(Layer::Conv2d {
            kernels: uniform(rng, [out_c, in_c, kernel, kernel], -a, a)?,
            bias: uniform(rng, [out_c], -a, a)?,
            stride,
            padding,
        })
    }

    /// Parameter tensors with their local names, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Affine { weight, bias } => vec![("weight", weight), ("bias", bias)],
            Layer::Conv2d { kernels, bias, .. } => vec![("weight", kernels), ("bias", bias)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Affine { weight, bias } => vec![("weight", weight), ("bias", bias)],
            Layer::Conv2d { kernels, bias, .. } => vec![("weight", kernels), ("bias", bias)],
            _ => Vec::new(),
        }
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundLayer<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        match self {
            Layer::Affine { weight, bias } => BoundLayer::Affine { w: leaf(weight), b: leaf(bias) },
            Layer::Conv2d { kernels, bias, stride, padding } => {
                BoundLayer::Conv2d { k: leaf(kernels), b: leaf(bias), stride: *stride, padding: *padding }
            }
            Layer::Relu => BoundLayer::Relu,
            Layer::Sigmoid => BoundLayer::Sigmoid,
            Layer::Reshape { dims } => BoundLayer::Reshape { dims: dims.clone() },
            Layer::Upsample { factor } => BoundLayer::Upsample { factor: *factor },
        }
    }
}

/// A [`Layer`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub(crate) enum BoundLayer<'t> {
    Affine { w: Var<'t>, b: Var<'t> },
    Conv2d { k: Var<'t>, b: Var<'t>, stride: usize, padding: usize },
    Relu,
    Sigmoid,
    Reshape { dims: Vec<usize> },
    Upsample { factor: usize },
}

fn batched_dims(batch: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(dims.len() + 1);
    out.push(batch);
    out.extend_from_slice(dims);
    out
}

impl<'t> BoundLayer<'t> {
    pub fn params(&self) -> Vec<Var<'t>> {
        match self {
            BoundLayer::Affine { w, b } | BoundLayer::Conv2d { k: w, b, .. } => vec![*w, *b],
            _ => Vec::new(),
        }
    }

    /// Forward pass on a batched value `[B, ...]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            BoundLayer::Affine { w, b } => x.affine(*w, *b),
            BoundLayer::Conv2d { k, b, stride, padding } => x.conv2d(*k, *b, *stride, *padding),
            BoundLayer::Relu => Ok(x.relu()),
            BoundLayer::Sigmoid => Ok(x.sigmoid()),
            BoundLayer::Reshape { dims } => {
                let batch = x.dims()[0];
                x.reshape(batched_dims(batch, dims))
            }
            BoundLayer::Upsample { factor } => x.upsample(*factor),
        }
    }

    /// Interval propagation on batched bounds.
    pub fn forward_bounds(&self, x: Bounds<'t>) -> Result<Bounds<'t>> {
        match self {
            BoundLayer::Affine { w, b } => x.affine(*w, *b),
            BoundLayer::Conv2d { k, b, stride, padding } => x.conv2d(*k, *b, *stride, *padding),
            BoundLayer::Relu => x.monotonic(UnaryKind::Relu),
            BoundLayer::Sigmoid => x.monotonic(UnaryKind::Sigmoid),
            BoundLayer::Reshape { dims } => {
                let batch = x.lower.dims()[0];
                x.reshape(batched_dims(batch, dims))
            }
            BoundLayer::Upsample { factor } => x.upsample(*factor),
        }
    }
}

pub(crate) fn run<'t>(layers: &[BoundLayer<'t>], mut x: Var<'t>) -> Result<Var<'t>> {
    for layer in layers {
        x = layer.forward(x)?;
    }
    Ok(x)
}

pub(crate) fn run_bounds<'t>(layers: &[BoundLayer<'t>], mut x: Bounds<'t>) -> Result<Bounds<'t>> {
    for layer in layers {
        x = layer.forward_bounds(x)?;
    }
    Ok(x)
}

/// Per-sample output dims of a layer stack applied to `input` dims, checking
/// every stage for shape consistency.
pub(crate) fn infer_dims(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let bound: Vec<_> = layers.iter().map(|l| l.bind(&tape, false)).collect();
    let x = tape.constant(Tensor::zeros(batched_dims(1, input))?);
    let y = run(&bound, x)?;
    let dims = y.dims();
    if dims.len() < 2 {
        return Err(Error::Contract("layer stack collapsed the batch axis".into()));
    }
    Ok(dims[1..].to_vec())
}
