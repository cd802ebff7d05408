//! Latent Gaussian process (LGP) latent curve models.
//!
//! Each individual carries a continuous-time latent curve θ_i(t) drawn from a
//! Gaussian process GP(m, K); observed indicators depend on θ_i only at the
//! observation times through per-item measurement models. The crate covers
//! simulation, marginal-likelihood fitting (closed-form EM for linear
//! indicators, stochastic EM with a Gibbs E-step for ordinal ones), posterior
//! curve inference and individual-level bootstrap.

pub mod basis;
pub mod data;
pub mod error;
pub mod fit;
pub mod gaussian;
pub mod kernels;
pub mod measurement;
pub mod model;
pub mod normal;
pub mod optim;
pub mod posterior;
pub mod rng;
pub mod simulate;

pub use error::{LgpError, Result};
