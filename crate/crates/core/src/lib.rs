//! Dynamic sparse Bayesian factor analysis for sparse, irregularly sampled
//! longitudinal biomarkers.
//!
//! Latent factor trajectories carry a convolution-process multi-output GP
//! prior ([`kernel`]); loadings carry point-mass mixture priors ([`model`]).
//! GP hyperparameters are estimated by stochastic EM with a roughness-penalized
//! M-step ([`stem`]), everything else by Gibbs sampling ([`gibbs`]).

pub mod alignment;
pub mod error;
pub mod gibbs;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod quadrature;
pub mod report;
pub mod simulate;
pub mod stem;
pub mod tuning;

pub use error::{Error, Result};
pub use kernel::{MogpHyperparams, TimeGrid};
pub use model::{Dataset, LatentState, PriorConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
