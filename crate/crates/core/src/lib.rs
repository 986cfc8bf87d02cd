//! Latent-reconstruction VAE workbench.
//!
//! Trains Gaussian/Bernoulli VAEs with an added latent-reconstruction term
//! `‖E_μ(D(z)) − z‖²`, measures posterior collapse (active units, sample-wise
//! KL, mutual information), and checks the underlying theory numerically:
//! decoder Jacobians and their spectra, Laplace posteriors, KL lower bounds,
//! bi-Lipschitz probes and closed-form linear-Gaussian oracles.
//!
//! The tape, linear algebra and special functions are generic over
//! [`Scalar`] (`f32`/`f64`); the model-level modules work in `f64` through the
//! aliases below.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod scalar;
pub mod special;

pub use autodiff::{Activation, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision tensor used by every model-level module.
pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Gradients = autodiff::Gradients<f64>;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
