//! Self-calibration of multichannel profile diagnostics.
//!
//! Channels observe a shared latent profile through unknown multiplicative
//! gains and with channel-dependent noise. The latent profile is a Gaussian
//! process with an RBF kernel; gains, noise amplitudes and kernel
//! hyperparameters are fitted by maximizing the marginal posterior, the
//! gains' posterior is then sampled by Metropolis MCMC, and the result is
//! turned into calibrated data plus credible bands for the profile and its
//! first two spatial derivatives.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use kernels::{KernelParams, NoiseParams};
pub use likelihood::{HyperParams, Priors};
pub use model::{CalibrationFactors, GroundTruth, ProfileSet};

/// Tag written into every output file.
pub const FORMAT_VERSION: &str = "selfcal-v1";
