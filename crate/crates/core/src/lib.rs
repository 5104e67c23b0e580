//! Certified training of variational auto-encoders against ℓ∞ input
//! perturbations, and out-of-distribution PGD evaluation.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense f64 tensors and a tape-based reverse-mode engine.
//! - [`interval`]: interval bound propagation primitives.
//! - [`vae`]: encoder/decoder networks, the ELBO, sampling.
//! - [`robust`]: the certified ELBO lower bound, certificates, and training.
//! - [`attack`]: PGD attacks that minimize the ELBO inside an ℓ∞ ball.
//! - [`data`]: IDX/CIFAR loaders, synthetic datasets, batching.

pub mod attack;
pub mod data;
pub mod error;
pub mod interval;
pub mod rng;
pub mod robust;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
