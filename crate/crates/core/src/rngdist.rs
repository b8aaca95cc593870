//! Seedable random streams and the exact samplers consumed by the Gibbs sweep.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit master seed with a
//! 64-bit stream selector, so `(seed, stream_id)` pins the whole sequence on
//! every platform and distinct selectors never overlap.
//!
//! Conventions: [`GammaParams`] uses a *rate*, [`InvGammaParams`] a *scale*.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Open01, StandardNormal};

use crate::error::{Error, Result};

/// Step kinds used to derive per-block substreams inside one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamKind {
    Counts = 0,
    X = 1,
    Z1 = 2,
    Z2 = 3,
    Observation = 4,
    Init = 5,
    Aux = 6,
}

/// Deterministic random source identified by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    /// Substream for one `(sweep, kind, block)` triple of a chain.
    ///
    /// Layout of the selector: sweep in the high 32 bits, kind in the next 8,
    /// block in the low 24.
    pub fn substream(seed: u64, sweep: u64, kind: StreamKind, block: u32) -> Self {
        debug_assert!(block < (1 << 24));
        let id = (sweep << 32) | ((kind as u64) << 24) | u64::from(block & 0x00ff_ffff);
        Self::new(seed, id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        Open01.sample(&mut self.rng)
    }

    pub fn std_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    pub(crate) fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Gamma law with density proportional to `t^(shape-1) exp(-rate t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        let p = Self { shape, rate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.shape.is_finite()) {
            return Err(Error::Domain(format!("gamma shape {} must be > 0", self.shape)));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::Domain(format!("gamma rate {} must be > 0", self.rate)));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }
}

/// Inverse-gamma law with density proportional to `t^(-shape-1) exp(-scale/t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaParams {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        let p = Self { shape, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.shape.is_finite()) {
            return Err(Error::Domain(format!(
                "inverse-gamma shape {} must be > 0",
                self.shape
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Domain(format!(
                "inverse-gamma scale {} must be > 0",
                self.scale
            )));
        }
        Ok(())
    }

    /// Mean `scale / (shape - 1)`, defined for `shape > 1`.
    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }
}

/// Unit-rate gamma draw by Marsaglia-Tsang squeeze rejection; shapes below
/// one go through `G(a) = G(a + 1) U^(1/a)` in log space.
fn unit_gamma(stream: &mut RandomStream, shape: f64) -> f64 {
    if shape < 1.0 {
        let g = unit_gamma(stream, shape + 1.0);
        let log_u = stream.uniform_open().ln();
        let v = (g.ln() + log_u / shape).exp();
        return v.max(f64::MIN_POSITIVE);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let z = stream.std_normal();
        let t = 1.0 + c * z;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = stream.uniform_open();
        let z2 = z * z;
        if u < 1.0 - 0.0331 * z2 * z2 || u.ln() < 0.5 * z2 + d * (1.0 - v + v.ln()) {
            return (d * v).max(f64::MIN_POSITIVE);
        }
    }
}

pub fn draw_gamma(stream: &mut RandomStream, p: GammaParams) -> Result<f64> {
    p.validate()?;
    Ok(draw_gamma_unchecked(stream, p.shape, p.rate))
}

/// Gamma draw for call sites whose parameters are positive by construction.
#[inline]
pub(crate) fn draw_gamma_unchecked(stream: &mut RandomStream, shape: f64, rate: f64) -> f64 {
    (unit_gamma(stream, shape) / rate).max(f64::MIN_POSITIVE)
}

/// Inverse-gamma draw as `1 / Gamma(shape, rate = scale)`.
pub fn draw_invgamma(stream: &mut RandomStream, p: InvGammaParams) -> Result<f64> {
    p.validate()?;
    Ok(draw_invgamma_unchecked(stream, p.shape, p.scale))
}

#[inline]
pub(crate) fn draw_invgamma_unchecked(stream: &mut RandomStream, shape: f64, scale: f64) -> f64 {
    let g = unit_gamma(stream, shape) / scale;
    (1.0 / g).min(f64::MAX)
}

/// Multinomial draw by sequential conditional binomials.
///
/// `probs` is renormalized internally; entries must be nonnegative.
pub fn draw_multinomial(stream: &mut RandomStream, total: u64, probs: &[f64]) -> Result<Vec<u64>> {
    if probs.is_empty() {
        return Err(Error::Domain("multinomial needs at least one category".into()));
    }
    if let Some(i) = probs.iter().position(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Domain(format!(
            "multinomial probability {} at index {i} is not a nonnegative number",
            probs[i]
        )));
    }
    let mut counts = vec![0u64; probs.len()];
    if total == 0 {
        return Ok(counts);
    }
    let mass: f64 = probs.iter().sum();
    if mass <= 0.0 {
        return Err(Error::Domain(
            "multinomial probabilities are all zero with a positive total".into(),
        ));
    }
    multinomial_into(stream, total, probs, mass, |j, c| counts[j] += c);
    Ok(counts)
}

/// Splits `total` over unnormalized nonnegative `weights` (sum `mass > 0`),
/// reporting each nonzero cell through `emit(index, count)`.
pub(crate) fn multinomial_into<F: FnMut(usize, u64)>(
    stream: &mut RandomStream,
    total: u64,
    weights: &[f64],
    mass: f64,
    mut emit: F,
) {
    let last = match weights.iter().rposition(|&w| w > 0.0) {
        Some(l) => l,
        None => return,
    };
    let mut remaining = total;
    let mut remaining_mass = mass;
    for (j, &w) in weights.iter().enumerate().take(last) {
        if remaining == 0 {
            return;
        }
        if w <= 0.0 {
            continue;
        }
        let p = (w / remaining_mass).clamp(0.0, 1.0);
        let c = if p >= 1.0 {
            remaining
        } else {
            // Binomial::new only fails for p outside [0, 1].
            Binomial::new(remaining, p)
                .expect("probability clamped to [0, 1]")
                .sample(stream.rng_mut())
        };
        if c > 0 {
            emit(j, c);
            remaining -= c;
        }
        remaining_mass -= w;
        if remaining_mass <= 0.0 {
            // Rounding ate the tail mass; the last support cell absorbs the rest.
            break;
        }
    }
    if remaining > 0 {
        emit(last, remaining);
    }
}

pub fn draw_std_normal_vec(stream: &mut RandomStream, len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::Domain("normal vector length must be >= 1".into()));
    }
    Ok((0..len).map(|_| stream.std_normal()).collect())
}
