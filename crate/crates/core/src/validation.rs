//! Brute-force oracles: exact enumeration of the latent-count augmentation,
//! conditional log-densities assembled from the joint augmented posterior,
//! and goodness-of-fit helpers.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::{bregman_div, DivergenceKind};
use crate::priors::{check_convergence_constants, Phase, ScorePrior};
use crate::rngdist::{draw_gamma, draw_invgamma, GammaParams, InvGammaParams, RandomStream};
use crate::sampler::{potential_gradient, step_counts, ChainState, PoissonModel, SweepStreams};

/// Upper bound on the number of latent-count configurations enumerated.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// A tiny Poisson problem with a dense `m × n` operator.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationCase {
    pub m: usize,
    pub n: usize,
    pub y: Vec<u64>,
    pub x: Vec<f64>,
    /// Row-major `m × n`.
    pub h: Vec<f64>,
    pub alpha: f64,
}

fn binomial_u128(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

impl EnumerationCase {
    pub fn new(m: usize, n: usize, y: Vec<u64>, x: Vec<f64>, h: Vec<f64>, alpha: f64) -> Result<Self> {
        let case = Self { m, n, y, x, h, alpha };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Domain("empty enumeration case".into()));
        }
        if self.y.len() != self.m {
            return Err(Error::LengthMismatch { expected: self.m, got: self.y.len() });
        }
        if self.x.len() != self.n {
            return Err(Error::LengthMismatch { expected: self.n, got: self.x.len() });
        }
        if self.h.len() != self.m * self.n {
            return Err(Error::LengthMismatch { expected: self.m * self.n, got: self.h.len() });
        }
        if self.x.iter().any(|&v| !(v > 0.0)) || self.h.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain("x must be positive and H nonnegative".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Domain("alpha must be positive".into()));
        }
        let size = self.enumeration_size();
        if size > ENUMERATION_LIMIT {
            return Err(Error::EnumerationTooLarge { size, limit: ENUMERATION_LIMIT });
        }
        Ok(())
    }

    /// `Π_i C(y_i + n − 1, n − 1)`, saturating.
    pub fn enumeration_size(&self) -> u128 {
        self.y.iter().fold(1u128, |acc, &yi| {
            acc.saturating_mul(binomial_u128(yi + self.n as u64 - 1, self.n as u64 - 1))
        })
    }

    /// Random case with `m ≤ 2`, `n ≤ 3`, `y_i ≤ 5`; rows carrying counts
    /// always have some positive weight.
    pub fn random(stream: &mut RandomStream) -> Self {
        let m = 1 + (stream.next_u64() % 2) as usize;
        let n = 1 + (stream.next_u64() % 3) as usize;
        let y: Vec<u64> = (0..m).map(|_| stream.next_u64() % 6).collect();
        let x: Vec<f64> = (0..n).map(|_| 0.1 + 3.0 * stream.uniform()).collect();
        let mut h = vec![0.0; m * n];
        for i in 0..m {
            loop {
                for j in 0..n {
                    h[i * n + j] = if stream.uniform() < 0.2 { 0.0 } else { 2.0 * stream.uniform_open() };
                }
                if h[i * n..(i + 1) * n].iter().any(|&v| v > 0.0) {
                    break;
                }
            }
        }
        let alpha = 0.5 + 4.5 * stream.uniform();
        Self { m, n, y, x, h, alpha }
    }

    fn rate(&self, i: usize) -> f64 {
        self.alpha * (0..self.n).map(|j| self.h[i * self.n + j] * self.x[j]).sum::<f64>()
    }
}

/// `log p(y | x)` for independent Poisson counts; `−∞` when a row with
/// positive count has zero rate.
pub fn poisson_loglik(case: &EnumerationCase) -> f64 {
    let mut total = 0.0;
    for i in 0..case.m {
        let r = case.rate(i);
        let yi = case.y[i];
        if yi == 0 {
            total -= r;
        } else if r <= 0.0 {
            return f64::NEG_INFINITY;
        } else {
            total += yi as f64 * r.ln() - r - ln_gamma(yi as f64 + 1.0);
        }
    }
    total
}

/// Advances `c` to the next composition of its sum in lexicographic order
/// (first part decreasing). Returns `false` after the last one.
fn next_composition(c: &mut [u64]) -> bool {
    let k = c.len();
    if k < 2 {
        return false;
    }
    // Rightmost position before the tail that can still give a unit.
    let Some(p) = (0..k - 1).rev().find(|&p| c[p] > 0) else {
        return false;
    };
    let tail: u64 = c[p + 1..].iter().sum();
    c[p] -= 1;
    for v in &mut c[p + 1..] {
        *v = 0;
    }
    c[p + 1] = tail + 1;
    true
}

/// All compositions of `total` into `parts` nonnegative parts.
pub fn compositions(total: u64, parts: usize) -> Vec<Vec<u64>> {
    let mut c = vec![0; parts];
    c[0] = total;
    let mut out = vec![c.clone()];
    while next_composition(&mut c) {
        out.push(c.clone());
    }
    out
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|&t| (t - mx).exp()).sum::<f64>().ln()
}

/// `log Σ_{n ∈ C_y} exp{−f(x, n; y)}` over every joint latent-count
/// configuration, where
/// `f = Σ_ij [α h_ij x_j − n_ij log(α h_ij x_j) + log n_ij!]`.
pub fn enumerate_augmented_marginal(case: &EnumerationCase) -> Result<f64> {
    case.validate()?;
    let (m, n) = (case.m, case.n);
    let per_row: Vec<Vec<Vec<u64>>> = case.y.iter().map(|&yi| compositions(yi, n)).collect();
    let lam: Vec<f64> = (0..m * n).map(|k| case.alpha * case.h[k] * case.x[k % n]).collect();

    let mut terms = Vec::with_capacity(case.enumeration_size() as usize);
    let mut idx = vec![0usize; m];
    loop {
        let mut neg_f = 0.0;
        for i in 0..m {
            for (j, &nij) in per_row[i][idx[i]].iter().enumerate() {
                let l = lam[i * n + j];
                neg_f -= l;
                if nij > 0 {
                    // 0^n = 0 for n > 0: ln(0) gives −∞ and kills the term.
                    neg_f += nij as f64 * l.ln() - ln_gamma(nij as f64 + 1.0);
                }
            }
        }
        terms.push(neg_f);
        // Mixed-radix odometer over rows, last row fastest.
        let mut r = m;
        loop {
            if r == 0 {
                return Ok(log_sum_exp(&terms));
            }
            r -= 1;
            idx[r] += 1;
            if idx[r] < per_row[r].len() {
                break;
            }
            idx[r] = 0;
        }
    }
}

/// Relative agreement in log space, treating equal infinities as agreeing.
pub fn log_agree(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Which full conditional of the augmented posterior to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditional {
    /// Latent counts of one row; `point` is a length-`n` count vector.
    CountsRow(usize),
    X,
    Z1,
    Z2,
}

/// Unnormalized log-density of one full conditional at `point`, with the
/// other blocks frozen at `state`. Built from the joint
///
/// `−f(x, n; y) − β g(z1) − (1/ρ) d_IS(z1, z2) − (1/ρ) d_IS(x, z2) − Σ log z1 − Σ log z2`
///
/// rather than from the samplers' closed-form parameters.
pub fn conditional_logdensity(
    which: Conditional,
    state: &ChainState,
    model: &PoissonModel,
    prior: &dyn ScorePrior,
    rho: f64,
    point: &[f64],
) -> Result<f64> {
    let n = model.n();
    if point.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: point.len() });
    }
    let positive = |v: &[f64]| -> Result<()> {
        match v.iter().position(|&t| !(t > 0.0) || !t.is_finite()) {
            Some(j) => Err(Error::Domain(format!("point[{j}] = {} outside support", v[j]))),
            None => Ok(()),
        }
    };
    let is = DivergenceKind::ItakuraSaito;
    match which {
        Conditional::CountsRow(i) => {
            if i >= model.m() {
                return Err(Error::IndexOutOfRange { index: i, len: model.m() });
            }
            let mut total = 0u64;
            for (j, &v) in point.iter().enumerate() {
                if !(v >= 0.0) || v.fract() != 0.0 {
                    return Err(Error::Domain(format!("count {j} = {v} is not a natural number")));
                }
                total += v as u64;
            }
            if total != model.y[i] {
                return Err(Error::Domain(format!(
                    "counts sum to {total}, coherence needs {}",
                    model.y[i]
                )));
            }
            let mut h = vec![0.0; n];
            let row = model.op.row(i)?;
            for (&j, &w) in row.indices.iter().zip(&row.weights) {
                h[j] = w;
            }
            let mut lp = 0.0;
            for j in 0..n {
                if point[j] > 0.0 {
                    if h[j] == 0.0 {
                        return Err(Error::Domain(format!("count on structural zero h_{i}{j}")));
                    }
                    lp += point[j] * (model.alpha * h[j] * state.x[j]).ln() - ln_gamma(point[j] + 1.0);
                }
            }
            Ok(lp)
        }
        Conditional::X => {
            positive(point)?;
            let hx = model.op.apply(point)?;
            let lik: f64 = state.s.iter().zip(point).map(|(&s, &x)| s as f64 * x.ln()).sum::<f64>()
                - model.alpha * hx.iter().sum::<f64>();
            Ok(lik - bregman_div(is, point, &state.z2)? / rho)
        }
        Conditional::Z1 => {
            positive(point)?;
            let g = prior.potential(point)?;
            let burg: f64 = point.iter().map(|v| v.ln()).sum();
            Ok(-prior.beta() * g - bregman_div(is, point, &state.z2)? / rho - burg)
        }
        Conditional::Z2 => {
            positive(point)?;
            let burg: f64 = point.iter().map(|v| v.ln()).sum();
            Ok(-(bregman_div(is, &state.z1, point)? + bregman_div(is, &state.x, point)?) / rho - burg)
        }
    }
}

/// Goodness-of-fit statistics.
pub mod gof {
    use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

    /// One-sample Kolmogorov–Smirnov statistic.
    pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        v.iter().enumerate().fold(0.0, |d, (k, &x)| {
            let f = cdf(x);
            d.max(f - k as f64 / n).max((k + 1) as f64 / n - f)
        })
    }

    /// Asymptotic Kolmogorov tail probability with the Stephens correction.
    pub fn kolmogorov_pvalue(d: f64, n: usize) -> f64 {
        let sn = (n as f64).sqrt();
        kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d)
    }

    fn kolmogorov_tail(lambda: f64) -> f64 {
        if lambda < 0.2 {
            return 1.0;
        }
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let t = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
            sum += if k % 2 == 1 { t } else { -t };
            if t < 1e-16 {
                break;
            }
        }
        sum.clamp(0.0, 1.0)
    }

    /// Two-sample Kolmogorov–Smirnov statistic.
    pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < a.len() && j < b.len() {
            let t = a[i].min(b[j]);
            while i < a.len() && a[i] <= t {
                i += 1;
            }
            while j < b.len() && b[j] <= t {
                j += 1;
            }
            d = d.max((i as f64 / na - j as f64 / nb).abs());
        }
        d
    }

    pub fn ks_two_sample_pvalue(d: f64, n1: usize, n2: usize) -> f64 {
        let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
        let se = ne.sqrt();
        kolmogorov_tail((se + 0.12 + 0.11 / se) * d)
    }

    /// Upper tail of the chi-square law.
    pub fn chi_square_sf(stat: f64, dof: usize) -> f64 {
        if dof == 0 {
            return 1.0;
        }
        let law = ChiSquared::new(dof as f64).expect("positive dof");
        law.sf(stat)
    }

    /// Pearson test of category counts against probabilities. Adjacent
    /// categories are pooled until each expected count reaches 5.
    /// Returns `(statistic, dof, p-value)`.
    pub fn chi_square_test(observed: &[u64], probs: &[f64]) -> (f64, usize, f64) {
        assert_eq!(observed.len(), probs.len());
        let total: u64 = observed.iter().sum();
        let nt = total as f64;
        let psum: f64 = probs.iter().sum();
        let mut bins: Vec<(f64, f64)> = Vec::new();
        let (mut o, mut e) = (0.0, 0.0);
        for (&ob, &p) in observed.iter().zip(probs) {
            o += ob as f64;
            e += nt * p / psum;
            if e >= 5.0 {
                bins.push((o, e));
                o = 0.0;
                e = 0.0;
            }
        }
        if e > 0.0 || o > 0.0 {
            match bins.last_mut() {
                Some(last) => {
                    last.0 += o;
                    last.1 += e;
                }
                None => bins.push((o, e)),
            }
        }
        let stat: f64 = bins.iter().map(|&(o, e)| (o - e) * (o - e) / e).sum();
        let dof = bins.len().saturating_sub(1);
        (stat, dof, chi_square_sf(stat, dof))
    }

    /// Chi-square p-value of i.i.d. draws against `Binomial(total, p)`.
    pub fn binomial_chi_square_pvalue(draws: &[u64], total: u64, p: f64) -> f64 {
        let law = Binomial::new(p, total).expect("valid binomial");
        let mut obs = vec![0u64; total as usize + 1];
        for &d in draws {
            obs[d as usize] += 1;
        }
        let probs: Vec<f64> = (0..=total).map(|k| law.pmf(k)).collect();
        chi_square_test(&obs, &probs).2
    }
}

/// One line of the oracle battery.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> OracleOutcome {
    OracleOutcome { name, passed, detail }
}

/// Worst relative log-space error of the augmentation identity over
/// `cases` random enumeration cases.
pub fn augmentation_battery(seed: u64, cases: usize) -> Result<f64> {
    let mut stream = RandomStream::new(seed, 0x7431);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let case = EnumerationCase::random(&mut stream);
        let a = enumerate_augmented_marginal(&case)?;
        let b = poisson_loglik(&case);
        if a != b {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()));
        }
    }
    Ok(worst)
}

/// Maximum discrepancy between log-density differences from
/// [`conditional_logdensity`] and from the closed-form family.
pub fn conditional_difference_audit(
    which: Conditional,
    state: &ChainState,
    model: &PoissonModel,
    prior: &dyn ScorePrior,
    rho: f64,
    stream: &mut RandomStream,
    trials: usize,
) -> Result<f64> {
    let n = model.n();
    let cols = model.op.col_sums();
    // Closed-form log-density of the whole block, up to a constant.
    let family = |p: &[f64]| -> f64 {
        (0..n)
            .map(|j| match which {
                Conditional::X => {
                    let a = state.s[j] as f64 + 1.0 / rho + 1.0;
                    let b = model.alpha * cols[j] + 1.0 / (rho * state.z2[j]);
                    (a - 1.0) * p[j].ln() - b * p[j]
                }
                Conditional::Z1 => {
                    let (a, b) = (1.0 / rho, 1.0 / (rho * state.z2[j]));
                    (a - 1.0) * p[j].ln() - b * p[j]
                }
                Conditional::Z2 => {
                    let (a, s) = (2.0 / rho, (state.x[j] + state.z1[j]) / rho);
                    -(a + 1.0) * p[j].ln() - s / p[j]
                }
                Conditional::CountsRow(_) => unreachable!("counts are audited by enumeration"),
            })
            .sum()
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let p: Vec<f64> = (0..n).map(|_| 0.2 + 2.0 * stream.uniform()).collect();
        let q: Vec<f64> = (0..n).map(|_| 0.2 + 2.0 * stream.uniform()).collect();
        let lhs = conditional_logdensity(which, state, model, prior, rho, &p)?
            - conditional_logdensity(which, state, model, prior, rho, &q)?;
        let rhs = family(&p) - family(&q);
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
    }
    Ok(worst)
}

/// Worst relative error of the assembled `∇U` against central differences
/// of the `z1` conditional log-density.
pub fn gradient_fd_audit(
    state: &ChainState,
    model: &PoissonModel,
    prior: &dyn ScorePrior,
    rho: f64,
) -> Result<f64> {
    let g = potential_gradient(&state.z1, &state.z2, prior, rho, Phase::Sampling)?;
    let mut z = state.z1.clone();
    let mut worst = 0.0f64;
    for j in 0..z.len() {
        let h = 1e-6 * state.z1[j];
        z[j] = state.z1[j] + h;
        let up = conditional_logdensity(Conditional::Z1, state, model, prior, rho, &z)?;
        z[j] = state.z1[j] - h;
        let dn = conditional_logdensity(Conditional::Z1, state, model, prior, rho, &z)?;
        z[j] = state.z1[j];
        // The log-density is −U, so its derivative is −∇U.
        let fd = -(up - dn) / (2.0 * h);
        worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1.0));
    }
    Ok(worst)
}

/// Exact row-counts distribution over all compositions, normalized from
/// [`conditional_logdensity`].
pub fn counts_row_law(
    i: usize,
    state: &ChainState,
    model: &PoissonModel,
    prior: &dyn ScorePrior,
) -> Result<(Vec<Vec<u64>>, Vec<f64>)> {
    let comps = compositions(model.y[i], model.n());
    let logs: Vec<f64> = comps
        .iter()
        .map(|c| {
            let p: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            conditional_logdensity(Conditional::CountsRow(i), state, model, prior, 1.0, &p)
                .unwrap_or(f64::NEG_INFINITY)
        })
        .collect();
    let z = log_sum_exp(&logs);
    Ok((comps, logs.iter().map(|l| (l - z).exp()).collect()))
}

/// Runs the fast oracle checks and returns one outcome per check.
pub fn run_oracle_battery(seed: u64) -> Result<Vec<OracleOutcome>> {
    use crate::operators::SparseOperator;
    use crate::priors::{FlatPrior, SmoothedTVParams, SmoothedTvPrior, TikhonovPrior};
    use std::sync::Arc;

    let mut out = Vec::new();
    let worst = augmentation_battery(seed, 100)?;
    out.push(outcome("augmentation-enumeration", worst <= 1e-12, format!("max rel err {worst:.3e}")));

    let mut st = RandomStream::new(seed, 0x7432);
    let dense: Vec<f64> = (0..12).map(|_| 0.1 + st.uniform()).collect();
    let op = Arc::new(SparseOperator::from_dense(3, 4, &dense)?);
    let model = PoissonModel::new(vec![3, 0, 2], 1.7, op)?;
    let state = ChainState {
        x: vec![0.4, 1.1, 0.8, 2.0],
        s: vec![2, 1, 0, 2],
        z1: vec![0.9, 0.5, 1.3, 0.7],
        z2: vec![1.2, 0.6, 0.9, 1.5],
    };
    let flat = FlatPrior::default();
    let rho = 0.3;
    for (which, name) in [
        (Conditional::X, "x-conditional-logdensity"),
        (Conditional::Z1, "z1-conditional-logdensity"),
        (Conditional::Z2, "z2-conditional-logdensity"),
    ] {
        let w = conditional_difference_audit(which, &state, &model, &flat, rho, &mut st, 50)?;
        out.push(outcome(name, w <= 1e-10, format!("max rel err {w:.3e}")));
    }

    // Counts: chi-square of sampled row compositions against the exact law.
    let single = PoissonModel::new(vec![3], 1.7, Arc::new(SparseOperator::from_dense(1, 4, &dense[..4])?))?;
    let (comps, probs) = counts_row_law(0, &state, &single, &flat)?;
    let mut hist = vec![0u64; comps.len()];
    for t in 0..20_000u64 {
        let s = step_counts(&single, &state.x, &SweepStreams::new(seed, t))?;
        let k = comps.iter().position(|c| *c == s).expect("sampled composition");
        hist[k] += 1;
    }
    let (_, _, pv) = gof::chi_square_test(&hist, &probs);
    out.push(outcome("counts-chi-square", pv > 1e-3, format!("p = {pv:.4}")));

    let p = GammaParams::new(2.7, 1.9)?;
    let draws: Vec<f64> = (0..20_000).map(|_| draw_gamma(&mut st, p)).collect::<Result<_>>()?;
    let law = statrs::distribution::Gamma::new(2.7, 1.9).expect("valid gamma");
    let d = gof::ks_statistic(&draws, |v| statrs::distribution::ContinuousCDF::cdf(&law, v));
    let pv = gof::kolmogorov_pvalue(d, draws.len());
    out.push(outcome("gamma-ks", pv > 1e-3, format!("p = {pv:.4}")));

    let p = InvGammaParams::new(3.3, 2.2)?;
    let draws: Vec<f64> = (0..20_000).map(|_| draw_invgamma(&mut st, p)).collect::<Result<_>>()?;
    // Y ~ InvGamma(a, b) iff 1/Y ~ Gamma(a, rate b).
    let law = statrs::distribution::Gamma::new(3.3, 2.2).expect("valid gamma");
    let d = gof::ks_statistic(&draws, |v| 1.0 - statrs::distribution::ContinuousCDF::cdf(&law, 1.0 / v));
    let pv = gof::kolmogorov_pvalue(d, draws.len());
    out.push(outcome("invgamma-ks", pv > 1e-3, format!("p = {pv:.4}")));

    let tv = SmoothedTvPrior::new(SmoothedTVParams { epsilon: 0.2, beta: 2.0 }, 2, 2)?;
    let tik = TikhonovPrior { center: vec![1.0; 4], beta: 0.7 };
    let mut worst = 0.0f64;
    for prior in [&flat as &dyn ScorePrior, &tik, &tv] {
        worst = worst.max(gradient_fd_audit(&state, &model, prior, rho)?);
    }
    out.push(outcome("potential-gradient-fd", worst <= 1e-5, format!("max rel err {worst:.3e}")));

    let c = check_convergence_constants(0.5, 1.0, 1.0, 0.5, 0.0)?;
    let c3 = check_convergence_constants(0.5, 1.0, 2.0, 0.1, 1.0)?;
    let ok = (c.m - 1.0625).abs() < 1e-12
        && (c.big_m - 2.0).abs() < 1e-12
        && c.rho_max == 1.0
        && (c3.rho_max - 1.0 / 2.875).abs() < 1e-12;
    out.push(outcome("convergence-constants", ok, format!("m = {}, M = {}", c.m, c.big_m)));
    Ok(out)
}
