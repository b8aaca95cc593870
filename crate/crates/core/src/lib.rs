//! Split Gibbs sampling for Bayesian Poisson inverse problems.
//!
//! The sampler augments Poisson observations with latent multinomial counts,
//! couples the image to a prior-side copy through two Itakura–Saito
//! splittings, and moves the prior-side copy with mirror Langevin steps in
//! the Burg entropy geometry, so every iterate stays strictly positive.

// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod operators;
pub mod priors;
pub mod rngdist;
pub mod sampler;
pub mod validation;

pub use error::{Error, Result};
pub use operators::{ForwardOperator, OperatorRow};
pub use priors::{Denoiser, Phase, ScorePrior};
pub use rngdist::RandomStream;
pub use sampler::{run_chain, Chain, ChainState, Checkpoint, PoissonModel, PosteriorSummary, SamplerConfig};
