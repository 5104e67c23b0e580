//! Variational auto-encoder with a Gaussian encoder `q(z|x) = N(μ(x), σ(x)²I)`,
//! standard normal prior, and Gaussian decoder `p(x|z) = N(g(z), σ₀²I)`.
//!
//! The encoder trunk is shared by the `μ` head and the `log σ` head. All
//! ELBO values drop the additive normalizing constant:
//!
//! ```text
//! elbo = -‖x - g(z)‖² / (2σ₀²) - KL(q(z|x) ‖ N(0, I)),   z = μ + σ ⊙ ε
//! ```

mod layer;

pub(crate) use layer::BoundLayer;
pub use layer::Layer;

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::interval::Bounds;
use crate::rng::{seeded, standard_normal};
use crate::tensor::{Tape, Tensor, Var};

/// Observation noise giving a unit weight on the squared reconstruction error.
pub const DEFAULT_SIGMA0: f64 = FRAC_1_SQRT_2;
pub const DEFAULT_LATENT_DIM: usize = 50;
pub const DEFAULT_DENSE_HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Fully connected trunk/decoder with the given hidden widths.
    Dense { hidden: Vec<usize> },
    /// Two stride-2 convolutions (32, 64 filters) in the encoder; the decoder
    /// mirrors it with an affine layer, nearest upsampling and 3×3 convolutions.
    Conv,
    /// Hand-built layers (test fixtures, toy models).
    Custom,
}

impl Preset {
    pub fn id(&self) -> &'static str {
        match self {
            Preset::Dense { .. } => "dense",
            Preset::Conv => "conv",
            Preset::Custom => "custom",
        }
    }
}

/// Everything needed to rebuild a model's layer structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub preset: Preset,
    /// Per-sample data shape `[C, H, W]`.
    pub data_shape: Vec<usize>,
    pub latent_dim: usize,
}

impl Architecture {
    pub fn dense(data_shape: &[usize], latent_dim: usize, hidden: &[usize]) -> Self {
        Architecture { preset: Preset::Dense { hidden: hidden.to_vec() }, data_shape: data_shape.to_vec(), latent_dim }
    }

    pub fn conv(data_shape: &[usize], latent_dim: usize) -> Self {
        Architecture { preset: Preset::Conv, data_shape: data_shape.to_vec(), latent_dim }
    }

    fn validate(&self) -> Result<()> {
        if self.data_shape.len() != 3 || self.data_shape.contains(&0) {
            return Err(Error::Config(format!("data shape must be [C, H, W], got {:?}", self.data_shape)));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        match &self.preset {
            Preset::Dense { hidden } if hidden.contains(&0) => {
                Err(Error::Config("hidden widths must be positive".into()))
            }
            Preset::Conv if !self.data_shape[1].is_multiple_of(4) || !self.data_shape[2].is_multiple_of(4) => {
                Err(Error::Config(format!("conv preset needs H and W divisible by 4, got {:?}", self.data_shape)))
            }
            Preset::Custom => Err(Error::Config("custom architectures are built with VaeModel::from_layers".into())),
            _ => Ok(()),
        }
    }

    fn build(&self, seed: u64) -> Result<Stacks> {
        self.validate()?;
        let mut rng = seeded(seed);
        let [c, h, w] = self.data_shape[..] else { unreachable!("validated") };
        let n = c * h * w;
        let j = self.latent_dim;
        match &self.preset {
            Preset::Dense { hidden } => {
                let mut trunk = vec![Layer::Reshape { dims: vec![n] }];
                let mut width = n;
                for &hd in hidden {
                    trunk.push(Layer::affine(&mut rng, width, hd)?);
                    trunk.push(Layer::Relu);
                    width = hd;
                }
                let mu = Layer::affine(&mut rng, width, j)?;
                let logsigma = Layer::affine(&mut rng, width, j)?;
                let mut decoder = Vec::new();
                let mut width = j;
                for &hd in hidden.iter().rev() {
                    decoder.push(Layer::affine(&mut rng, width, hd)?);
                    decoder.push(Layer::Relu);
                    width = hd;
                }
                decoder.push(Layer::affine(&mut rng, width, n)?);
                decoder.push(Layer::Sigmoid);
                decoder.push(Layer::Reshape { dims: self.data_shape.clone() });
                Ok(Stacks { trunk, mu, logsigma, decoder })
            }
            Preset::Conv => {
                let (h4, w4) = (h / 4, w / 4);
                let flat = 64 * h4 * w4;
                let trunk = vec![
                    Layer::conv(&mut rng, c, 32, 4, 2, 1)?,
                    Layer::Relu,
                    Layer::conv(&mut rng, 32, 64, 4, 2, 1)?,
                    Layer::Relu,
                    Layer::Reshape { dims: vec![flat] },
                ];
                let mu = Layer::affine(&mut rng, flat, j)?;
                let logsigma = Layer::affine(&mut rng, flat, j)?;
                let decoder = vec![
                    Layer::affine(&mut rng, j, flat)?,
                    Layer::Relu,
                    Layer::Reshape { dims: vec![64, h4, w4] },
                    Layer::Upsample { factor: 2 },
                    Layer::conv(&mut rng, 64, 32, 3, 1, 1)?,
                    Layer::Relu,
                    Layer::Upsample { factor: 2 },
                    Layer::conv(&mut rng, 32, c, 3, 1, 1)?,
                    Layer::Sigmoid,
                ];
                Ok(Stacks { trunk, mu, logsigma, decoder })
            }
            Preset::Custom => unreachable!("validated"),
        }
    }
}

struct Stacks {
    trunk: Vec<Layer>,
    mu: Layer,
    logsigma: Layer,
    decoder: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    arch: Architecture,
    sigma0: f64,
    trunk: Vec<Layer>,
    mu_head: Layer,
    logsigma_head: Layer,
    decoder: Vec<Layer>,
}

/// Single-sample ELBO decomposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    /// `‖x - g(z)‖²` for one noise draw.
    pub recon_sq: f64,
    pub kl: f64,
    pub elbo: f64,
}

impl VaeModel {
    /// Freshly initialized model for a preset architecture.
    pub fn new(arch: Architecture, sigma0: f64, seed: u64) -> Result<Self> {
        let stacks = arch.build(seed)?;
        Self::assemble(arch, sigma0, stacks)
    }

    /// Model from explicit layer stacks. Heads must be affine layers; the
    /// decoder must map `[J]` to the data shape. No output activation is
    /// enforced, so decoders without a final sigmoid are allowed here.
    pub fn from_layers(
        data_shape: &[usize],
        latent_dim: usize,
        sigma0: f64,
        trunk: Vec<Layer>,
        mu_head: Layer,
        logsigma_head: Layer,
        decoder: Vec<Layer>,
    ) -> Result<Self> {
        let arch = Architecture { preset: Preset::Custom, data_shape: data_shape.to_vec(), latent_dim };
        Self::assemble(arch, sigma0, Stacks { trunk, mu: mu_head, logsigma: logsigma_head, decoder })
    }

    fn assemble(arch: Architecture, sigma0: f64, stacks: Stacks) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 must be positive, got {sigma0}")));
        }
        let trunk_out = layer::infer_dims(&stacks.trunk, &arch.data_shape)?;
        for head in [&stacks.mu, &stacks.logsigma] {
            if !matches!(head, Layer::Affine { .. }) {
                return Err(Error::Config("encoder heads must be affine layers".into()));
            }
            let out = layer::infer_dims(std::slice::from_ref(head), &trunk_out)?;
            if out != [arch.latent_dim] {
                return Err(Error::dim("encoder head", &out, &[arch.latent_dim]));
            }
        }
        let dec_out = layer::infer_dims(&stacks.decoder, &[arch.latent_dim])?;
        if dec_out != arch.data_shape {
            return Err(Error::dim("decoder output", &dec_out, &arch.data_shape));
        }
        Ok(VaeModel {
            arch,
            sigma0,
            trunk: stacks.trunk,
            mu_head: stacks.mu,
            logsigma_head: stacks.logsigma,
            decoder: stacks.decoder,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn data_shape(&self) -> &[usize] {
        &self.arch.data_shape
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn data_len(&self) -> usize {
        self.arch.data_shape.iter().product()
    }

    fn stacks(&self) -> [(&'static str, &[Layer]); 4] {
        [
            ("encoder", &self.trunk[..]),
            ("mu", std::slice::from_ref(&self.mu_head)),
            ("logsigma", std::slice::from_ref(&self.logsigma_head)),
            ("decoder", &self.decoder[..]),
        ]
    }

    /// Named parameters in a fixed order: `encoder.<i>.weight`, `mu.weight`,
    /// `logsigma.bias`, `decoder.<i>.bias`, ...
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (stack, layers) in self.stacks() {
            for (i, layer) in layers.iter().enumerate() {
                for (name, t) in layer.params() {
                    out.push((param_name(stack, i, layers.len(), name), t));
                }
            }
        }
        out
    }

    /// Same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let n_trunk = self.trunk.len();
        let n_dec = self.decoder.len();
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            for (name, t) in layer.params_mut() {
                out.push((param_name("encoder", i, n_trunk, name), t));
            }
        }
        for (name, t) in self.mu_head.params_mut() {
            out.push((param_name("mu", 0, 1, name), t));
        }
        for (name, t) in self.logsigma_head.params_mut() {
            out.push((param_name("logsigma", 0, 1, name), t));
        }
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            for (name, t) in layer.params_mut() {
                out.push((param_name("decoder", i, n_dec, name), t));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundVae<'t> {
        let bind_all = |ls: &[Layer]| ls.iter().map(|l| l.bind(tape, trainable)).collect();
        BoundVae {
            trunk: bind_all(&self.trunk),
            mu_head: self.mu_head.bind(tape, trainable),
            logsigma_head: self.logsigma_head.bind(tape, trainable),
            decoder: bind_all(&self.decoder),
            sigma0: self.sigma0,
            latent_dim: self.arch.latent_dim,
            data_shape: self.arch.data_shape.clone(),
        }
    }

    /// Interprets `x` as one sample (data shape) or a batch (`[B] ++ data shape`).
    pub(crate) fn as_batch(&self, x: &Tensor) -> Result<(Tensor, bool)> {
        let ds = self.data_shape();
        if x.dims() == ds {
            let mut dims = vec![1];
            dims.extend_from_slice(ds);
            Ok((x.reshape(dims)?, true))
        } else if x.dims().len() == ds.len() + 1 && &x.dims()[1..] == ds {
            Ok((x.clone(), false))
        } else {
            Err(Error::dim("model input", x.dims(), ds))
        }
    }

    fn as_latent_batch(&self, z: &Tensor) -> Result<(Tensor, bool)> {
        let j = self.latent_dim();
        match *z.dims() {
            [n] if n == j => Ok((z.reshape([1, j])?, true)),
            [_, n] if n == j => Ok((z.clone(), false)),
            _ => Err(Error::dim("latent", z.dims(), &[j])),
        }
    }
}

fn param_name(stack: &str, index: usize, len: usize, local: &str) -> String {
    if stack == "mu" || stack == "logsigma" {
        debug_assert_eq!((index, len), (0, 1));
        format!("{stack}.{local}")
    } else {
        format!("{stack}.{index}.{local}")
    }
}

fn unbatch(t: Tensor, single: bool) -> Result<Tensor> {
    if single {
        Ok(t.row(0)?)
    } else {
        Ok(t)
    }
}

/// A [`VaeModel`] bound onto a tape.
pub struct BoundVae<'t> {
    pub(crate) trunk: Vec<BoundLayer<'t>>,
    pub(crate) mu_head: BoundLayer<'t>,
    pub(crate) logsigma_head: BoundLayer<'t>,
    pub(crate) decoder: Vec<BoundLayer<'t>>,
    pub(crate) sigma0: f64,
    pub(crate) latent_dim: usize,
    pub(crate) data_shape: Vec<usize>,
}

/// Batched ELBO pieces on a tape; each is `[B]`.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars<'t> {
    pub recon_sq: Var<'t>,
    pub kl: Var<'t>,
    pub elbo: Var<'t>,
}

impl<'t> BoundVae<'t> {
    /// Parameter leaves in [`VaeModel::params`] order.
    pub fn params(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for l in &self.trunk {
            out.extend(l.params());
        }
        out.extend(self.mu_head.params());
        out.extend(self.logsigma_head.params());
        for l in &self.decoder {
            out.extend(l.params());
        }
        out
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn data_shape(&self) -> &[usize] {
        &self.data_shape
    }

    /// `(μ, log σ)` for a batch `[B, C, H, W]`, each `[B, J]`.
    pub fn encode(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = layer::run(&self.trunk, x)?;
        Ok((self.mu_head.forward(h)?, self.logsigma_head.forward(h)?))
    }

    pub fn decode(&self, z: Var<'t>) -> Result<Var<'t>> {
        layer::run(&self.decoder, z)
    }

    pub fn elbo(&self, x: Var<'t>, noise: Var<'t>) -> Result<ElboVars<'t>> {
        let (mu, logsigma) = self.encode(x)?;
        let z = reparameterize(mu, logsigma, noise)?;
        let xhat = self.decode(z)?;
        let recon_sq = x.sub(xhat)?.square().sum_rows()?;
        let kl = kl_divergence(mu, logsigma)?;
        let elbo = recon_sq.scale(-1.0 / (2.0 * self.sigma0 * self.sigma0)).sub(kl)?;
        Ok(ElboVars { recon_sq, kl, elbo })
    }

    /// Interval bounds on `(μ, log σ)` for batched input bounds.
    pub fn encode_bounds(&self, x: Bounds<'t>) -> Result<(Bounds<'t>, Bounds<'t>)> {
        let h = layer::run_bounds(&self.trunk, x)?;
        Ok((self.mu_head.forward_bounds(h)?, self.logsigma_head.forward_bounds(h)?))
    }

    pub fn decode_bounds(&self, z: Bounds<'t>) -> Result<Bounds<'t>> {
        layer::run_bounds(&self.decoder, z)
    }
}

/// `z = μ + exp(log σ) ⊙ noise`.
pub fn reparameterize<'t>(mu: Var<'t>, logsigma: Var<'t>, noise: Var<'t>) -> Result<Var<'t>> {
    mu.add(logsigma.exp().mul(noise)?)
}

/// Per-row `KL(N(μ, σ²I) ‖ N(0, I)) = ½ Σ_j (μ² + σ² - log σ² - 1)` for `[B, J]` inputs.
pub fn kl_divergence<'t>(mu: Var<'t>, logsigma: Var<'t>) -> Result<Var<'t>> {
    let j = mu.dims().last().copied().unwrap_or(1) as f64;
    let two_ls = logsigma.scale(2.0);
    let per = mu.square().add(two_ls.exp())?.sub(two_ls)?;
    Ok(per.sum_rows()?.scale(0.5).add_scalar(-0.5 * j))
}

/// `(μ, log σ)` for a sample or batch.
pub fn encode(model: &VaeModel, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (xb, single) = model.as_batch(x)?;
    let tape = Tape::new();
    let (mu, ls) = model.bind(&tape, false).encode(tape.constant(xb))?;
    Ok((unbatch(mu.to_tensor(), single)?, unbatch(ls.to_tensor(), single)?))
}

/// Decoder output for a latent vector `[J]` or batch `[B, J]`.
pub fn decode(model: &VaeModel, z: &Tensor) -> Result<Tensor> {
    let (zb, single) = model.as_latent_batch(z)?;
    let tape = Tape::new();
    let out = model.bind(&tape, false).decode(tape.constant(zb))?;
    unbatch(out.to_tensor(), single)
}

/// Single-draw ELBO for each sample in a batch `[B, ...]` with noise `[B, J]`.
pub fn elbo_batch(model: &VaeModel, xs: &Tensor, noise: &Tensor) -> Result<Vec<ElboTerms>> {
    let (xb, _) = model.as_batch(xs)?;
    let b = xb.dims()[0];
    if noise.dims() != [b, model.latent_dim()] {
        return Err(Error::dim("elbo noise", noise.dims(), &[b, model.latent_dim()]));
    }
    let tape = Tape::new();
    let terms = model.bind(&tape, false).elbo(tape.constant(xb), tape.constant(noise.clone()))?;
    let (r, k, e) = (terms.recon_sq.to_tensor(), terms.kl.to_tensor(), terms.elbo.to_tensor());
    Ok((0..b).map(|i| ElboTerms { recon_sq: r.data()[i], kl: k.data()[i], elbo: e.data()[i] }).collect())
}

/// Single-draw ELBO of one sample with noise `[J]`.
pub fn elbo(model: &VaeModel, x: &Tensor, noise: &Tensor) -> Result<ElboTerms> {
    let (xb, single) = model.as_batch(x)?;
    if !single {
        return Err(Error::dim("elbo input", x.dims(), model.data_shape()));
    }
    let (nb, _) = model.as_latent_batch(noise)?;
    Ok(elbo_batch(model, &xb, &nb)?[0])
}

/// ELBO of one sample averaged over `draws` seeded noise samples.
pub fn elbo_estimate(model: &VaeModel, x: &Tensor, draws: usize, seed: u64) -> Result<f64> {
    if draws == 0 {
        return Err(Error::Config("need at least one noise draw".into()));
    }
    let noise = standard_normal(&mut seeded(seed), [draws, model.latent_dim()])?;
    let xs = Tensor::stack(&vec![x; draws])?;
    let terms = elbo_batch(model, &xs, &noise)?;
    Ok(terms.iter().map(|t| t.elbo).sum::<f64>() / draws as f64)
}

/// Decodes `n` latent vectors drawn from `N(0, I)` with the given seed.
pub fn sample(model: &VaeModel, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let z = standard_normal(&mut seeded(seed), [n, model.latent_dim()])?;
    Ok(decode(model, &z)?.unstack())
}

/// Every intermediate value of the forward pass for a batch `[B, ...]` with
/// noise `[B, J]`: each trunk stage, `μ`, `log σ`, `z`, then each decoder stage.
pub fn trace(model: &VaeModel, xs: &Tensor, noise: &Tensor) -> Result<Vec<Tensor>> {
    let (xb, _) = model.as_batch(xs)?;
    let tape = Tape::new();
    let vae = model.bind(&tape, false);
    let mut out = Vec::new();
    let mut h = tape.constant(xb);
    for l in &vae.trunk {
        h = l.forward(h)?;
        out.push(h.to_tensor());
    }
    let (mu, ls) = (vae.mu_head.forward(h)?, vae.logsigma_head.forward(h)?);
    let mut z = reparameterize(mu, ls, tape.constant(noise.clone()))?;
    out.extend([mu.to_tensor(), ls.to_tensor(), z.to_tensor()]);
    for l in &vae.decoder {
        z = l.forward(z)?;
        out.push(z.to_tensor());
    }
    Ok(out)
}
