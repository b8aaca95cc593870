//! Synthetic experiments: data generation, configuration and artifacts.

pub mod config;
pub mod image;
pub mod phantom;
pub mod run;

use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::operators::ForwardOperator;
use crate::rngdist::RandomStream;

pub use config::{ExperimentConfig, InitKind, ImageSpec, OperatorSpec, OutputSpec, PriorKind, PriorSpec, Task};
pub use image::ImageBuffer;
pub use phantom::shepp_logan_phantom;
pub use run::{run_experiment, RunOutput, RunSummary, SCHEMA_VERSION};

/// Independent Poisson counts with rates `α (Hx)_i`.
pub fn generate_observation(
    x_true: &[f64],
    op: &dyn ForwardOperator,
    alpha: f64,
    stream: &mut RandomStream,
) -> Result<Vec<u64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha {alpha} must be > 0")));
    }
    if let Some(j) = x_true.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::Domain(format!("x_true[{j}] is negative")));
    }
    let hx = op.apply(x_true)?;
    Ok(hx
        .iter()
        .map(|&h| {
            let rate = alpha * h;
            if rate > 0.0 {
                Poisson::new(rate).expect("finite positive rate").sample(stream.rng_mut()) as u64
            } else {
                0
            }
        })
        .collect())
}

/// SplitMix64 finalizer, used to derive independent per-channel seeds.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
