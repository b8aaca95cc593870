//! Separable Bregman generators, their divergences, and the mirror-map
//! calculus (gradient, diagonal Hessian, Legendre inverse of the gradient).

use crate::error::{Error, Result};

/// Smallest value accepted as strictly positive by the orthant-domain maps.
pub const DOMAIN_FLOOR: f64 = 1e-300;

/// Generator of a separable mirror map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MirrorMap {
    /// `h(x) = -sum log x_i` on the open positive orthant.
    BurgEntropy,
    /// `h(x) = sum x_i log x_i - x_i` on the open positive orthant.
    NegEntropy,
    /// `h(x) = 0.5 ||x||^2` on the whole space.
    HalfSquaredNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DivergenceKind {
    Euclidean,
    KL,
    ItakuraSaito,
}

impl DivergenceKind {
    pub fn mirror_map(self) -> MirrorMap {
        match self {
            DivergenceKind::Euclidean => MirrorMap::HalfSquaredNorm,
            DivergenceKind::KL => MirrorMap::NegEntropy,
            DivergenceKind::ItakuraSaito => MirrorMap::BurgEntropy,
        }
    }
}

impl MirrorMap {
    pub fn positive_domain(self) -> bool {
        !matches!(self, MirrorMap::HalfSquaredNorm)
    }

    fn check_domain(self, z: &[f64]) -> Result<()> {
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                what: "mirror-map argument",
                index: i,
            });
        }
        if self.positive_domain() {
            if let Some(i) = z.iter().position(|&v| v <= DOMAIN_FLOOR) {
                return Err(Error::Domain(format!(
                    "entry {i} = {:e} is outside the open positive orthant",
                    z[i]
                )));
            }
        }
        Ok(())
    }

    /// Generator value `h(z)`.
    pub fn generator(self, z: &[f64]) -> Result<f64> {
        self.check_domain(z)?;
        Ok(match self {
            MirrorMap::BurgEntropy => -z.iter().map(|v| v.ln()).sum::<f64>(),
            MirrorMap::NegEntropy => z.iter().map(|&v| v * v.ln() - v).sum(),
            MirrorMap::HalfSquaredNorm => 0.5 * z.iter().map(|v| v * v).sum::<f64>(),
        })
    }
}

/// `∇h(z)` componentwise.
pub fn mirror_grad(map: MirrorMap, z: &[f64]) -> Result<Vec<f64>> {
    map.check_domain(z)?;
    Ok(match map {
        MirrorMap::BurgEntropy => z.iter().map(|&v| -1.0 / v).collect(),
        MirrorMap::NegEntropy => z.iter().map(|v| v.ln()).collect(),
        MirrorMap::HalfSquaredNorm => z.to_vec(),
    })
}

/// Diagonal of `∇²h(z)`.
pub fn mirror_hess_diag(map: MirrorMap, z: &[f64]) -> Result<Vec<f64>> {
    map.check_domain(z)?;
    Ok(match map {
        MirrorMap::BurgEntropy => z.iter().map(|&v| 1.0 / (v * v)).collect(),
        MirrorMap::NegEntropy => z.iter().map(|&v| 1.0 / v).collect(),
        MirrorMap::HalfSquaredNorm => vec![1.0; z.len()],
    })
}

/// Inverse of [`mirror_grad`]. For the Burg map the range is the open
/// negative orthant; offending indices are reported in [`Error::Range`].
pub fn mirror_grad_inverse(map: MirrorMap, theta: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            what: "dual variable",
            index: i,
        });
    }
    match map {
        MirrorMap::BurgEntropy => {
            let bad: Vec<usize> = theta
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= 0.0)
                .map(|(i, _)| i)
                .collect();
            if !bad.is_empty() {
                return Err(Error::Range { indices: bad });
            }
            Ok(theta.iter().map(|&t| -1.0 / t).collect())
        }
        MirrorMap::NegEntropy => Ok(theta.iter().map(|t| t.exp()).collect()),
        MirrorMap::HalfSquaredNorm => Ok(theta.to_vec()),
    }
}

/// Closed-form Bregman divergence `d_h(x, z)`.
pub fn bregman_div(kind: DivergenceKind, x: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() != z.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: z.len(),
        });
    }
    let map = kind.mirror_map();
    map.check_domain(x)?;
    map.check_domain(z)?;
    let d: f64 = match kind {
        DivergenceKind::Euclidean => {
            0.5 * x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        }
        DivergenceKind::KL => x
            .iter()
            .zip(z)
            .map(|(&a, &b)| a * (a / b).ln() - a + b)
            .sum(),
        DivergenceKind::ItakuraSaito => x
            .iter()
            .zip(z)
            .map(|(&a, &b)| {
                let r = a / b;
                r - r.ln() - 1.0
            })
            .sum(),
    };
    // Rounding can leave a tiny negative residue near x == z.
    Ok(d.max(0.0))
}
