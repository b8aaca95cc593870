//! Split Gibbs sampler for Poisson inverse problems.
//!
//! One sweep updates, in this order:
//!
//! 1. latent counts, row by row, from `Multinomial(y_i, h_ij x_j / h_iᵀx)`;
//!    only their column sums `s_j = Σ_i n_ij` are kept;
//! 2. `x_j ~ Gamma(s_j + 1/ρ + 1, rate α Σ_i h_ij + 1/(ρ z2_j))`;
//! 3. `z1` by mirror Langevin steps in the Burg geometry on
//!    `U(z1) = β g(z1) + Σ log z1 + (1/ρ) Σ (z1/z2 − log z1)`;
//! 4. `z2_j ~ InvGamma(2/ρ, scale (x_j + z1_j)/ρ)`.
//!
//! Randomness comes from per-`(sweep, step, block)` substreams, so a chain
//! is a pure function of `(seed, config, data)` whatever the thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::SampleMatrix;
use crate::error::{Error, Result};
use crate::operators::{ForwardOperator, OperatorRow};
use crate::priors::{Phase, ScorePrior};
use crate::rngdist::{
    draw_gamma_unchecked, draw_invgamma_unchecked, multinomial_into, RandomStream, StreamKind,
};

/// Pixels (or rows) per substream block.
pub const BLOCK: usize = 1024;

/// Observed counts with their intensity scale and forward operator.
#[derive(Debug, Clone)]
pub struct PoissonModel {
    pub y: Vec<u64>,
    pub alpha: f64,
    pub op: Arc<dyn ForwardOperator>,
}

impl PoissonModel {
    pub fn new(y: Vec<u64>, alpha: f64, op: Arc<dyn ForwardOperator>) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha {alpha} must be > 0")));
        }
        if y.len() != op.nrows() {
            return Err(Error::LengthMismatch {
                expected: op.nrows(),
                got: y.len(),
            });
        }
        let mut buf = OperatorRow::default();
        for (i, &yi) in y.iter().enumerate() {
            if yi > 0 {
                op.row_into(i, &mut buf)?;
                if buf.is_empty() {
                    return Err(Error::Model(format!("row {i} is empty but y_{i} = {yi}")));
                }
            }
        }
        Ok(Self { y, alpha, op })
    }

    pub fn n(&self) -> usize {
        self.op.ncols()
    }

    pub fn m(&self) -> usize {
        self.op.nrows()
    }

    pub fn total_counts(&self) -> u64 {
        self.y.iter().sum()
    }
}

fn default_inner_steps() -> usize {
    1
}

fn default_thin() -> usize {
    1
}

fn default_theta_guard() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Coupling `ρ` of the two splitting kernels.
    pub rho: f64,
    /// Mirror Langevin step size `γ`.
    pub gamma_step: f64,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    /// Total sweeps.
    pub n_mc: usize,
    /// Burn-in sweeps, excluded from the summary.
    pub n_bi: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    /// Dual values at or above `-theta_guard` are clamped to it.
    #[serde(default = "default_theta_guard")]
    pub theta_guard: f64,
    /// Pixels whose trajectories are kept for autocorrelation; empty means
    /// the centre pixel.
    #[serde(default)]
    pub trace_pixels: Vec<usize>,
}

impl SamplerConfig {
    pub fn new(rho: f64, gamma_step: f64, n_mc: usize, n_bi: usize, seed: u64) -> Self {
        Self {
            rho,
            gamma_step,
            inner_steps: 1,
            n_mc,
            n_bi,
            thin: 1,
            seed,
            theta_guard: default_theta_guard(),
            trace_pixels: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho {} must be > 0", self.rho));
        }
        if !(self.gamma_step > 0.0 && self.gamma_step.is_finite()) {
            return bad(format!("gamma_step {} must be > 0", self.gamma_step));
        }
        if self.inner_steps == 0 || self.thin == 0 {
            return bad("inner_steps and thin must be >= 1".into());
        }
        if self.n_bi >= self.n_mc {
            return bad(format!("n_bi {} must be < n_mc {}", self.n_bi, self.n_mc));
        }
        if !(self.theta_guard > 0.0) {
            return bad("theta_guard must be > 0".into());
        }
        Ok(())
    }
}

/// Mutable state of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: Vec<f64>,
    /// Column sums of the latent counts from the last count step.
    pub s: Vec<u64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

impl ChainState {
    pub fn constant(n: usize, value: f64) -> Self {
        Self {
            x: vec![value; n],
            s: vec![0; n],
            z1: vec![value; n],
            z2: vec![value; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (what, v) in [("x", &self.x), ("z1", &self.z1), ("z2", &self.z2)] {
            if v.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
            if let Some(j) = v.iter().position(|&t| !(t > 0.0) || !t.is_finite()) {
                return Err(Error::Domain(format!("{what}[{j}] = {} is not positive", v[j])));
            }
        }
        if self.s.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: self.s.len(),
            });
        }
        Ok(())
    }
}

/// Constant state at `max(mean(y) / (α mean(colsum)), 1e-3)`.
pub fn default_init(model: &PoissonModel) -> ChainState {
    let n = model.n();
    let mean_y = model.total_counts() as f64 / model.m().max(1) as f64;
    let mean_col = model.op.col_sums().iter().sum::<f64>() / n.max(1) as f64;
    let level = if mean_col > 0.0 {
        mean_y / (model.alpha * mean_col)
    } else {
        0.0
    };
    ChainState::constant(n, level.max(1e-3))
}

/// One multiplicative EM step from the all-ones image: `x_j = Σ_i h_ij y_i /
/// (α colsum_j)`, floored at `floor`. Equals `y/α` for the identity.
pub fn backprojection_init(model: &PoissonModel, floor: f64) -> Result<ChainState> {
    let n = model.n();
    let mut back = vec![0.0; n];
    let mut row = OperatorRow::default();
    for (i, &yi) in model.y.iter().enumerate() {
        if yi == 0 {
            continue;
        }
        model.op.row_into(i, &mut row)?;
        for (&j, &h) in row.indices.iter().zip(&row.weights) {
            back[j] += h * yi as f64;
        }
    }
    let cols = model.op.col_sums();
    let x: Vec<f64> = back
        .iter()
        .zip(cols.iter())
        .map(|(&b, &c)| if c > 0.0 { (b / (model.alpha * c)).max(floor) } else { floor })
        .collect();
    Ok(ChainState { s: vec![0; n], z1: x.clone(), z2: x.clone(), x })
}

/// Substream factory for one sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepStreams {
    pub seed: u64,
    pub sweep: u64,
}

impl SweepStreams {
    pub fn new(seed: u64, sweep: u64) -> Self {
        Self { seed, sweep }
    }

    pub fn block(&self, kind: StreamKind, block: usize) -> RandomStream {
        RandomStream::substream(self.seed, self.sweep, kind, block as u32)
    }
}

fn n_blocks(len: usize) -> usize {
    len.div_ceil(BLOCK).max(1)
}

/// Draws the latent counts row by row and returns their column sums.
pub fn step_counts(model: &PoissonModel, x: &[f64], streams: &SweepStreams) -> Result<Vec<u64>> {
    let n = model.n();
    if x.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let m = model.m();
    let block_counts = |b: usize| -> Result<Vec<(usize, u64)>> {
        let mut stream = streams.block(StreamKind::Counts, b);
        let mut row = OperatorRow::default();
        let mut weights = Vec::new();
        let mut out = Vec::new();
        for i in b * BLOCK..((b + 1) * BLOCK).min(m) {
            let yi = model.y[i];
            if yi == 0 {
                continue;
            }
            model.op.row_into(i, &mut row)?;
            weights.clear();
            weights.extend(row.indices.iter().zip(&row.weights).map(|(&j, &w)| w * x[j]));
            let mass: f64 = weights.iter().sum();
            if !(mass > 0.0) || !mass.is_finite() {
                return Err(Error::Model(format!(
                    "row {i} has normalizer {mass} with y_{i} = {yi}"
                )));
            }
            multinomial_into(&mut stream, yi, &weights, mass, |k, c| {
                out.push((row.indices[k], c))
            });
        }
        Ok(out)
    };
    let nb = n_blocks(m);
    let parts: Vec<Vec<(usize, u64)>> = if nb == 1 {
        vec![block_counts(0)?]
    } else {
        (0..nb).into_par_iter().map(block_counts).collect::<Result<_>>()?
    };
    let mut s = vec![0u64; n];
    for part in parts {
        for (j, c) in part {
            s[j] += c;
        }
    }
    Ok(s)
}

fn par_blocks<F>(out: &mut [f64], f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if out.len() <= BLOCK {
        f(0, out);
    } else {
        out.par_chunks_mut(BLOCK).enumerate().for_each(|(b, chunk)| f(b, chunk));
    }
}

/// Componentwise gamma draws for `x`.
pub fn step_x(
    model: &PoissonModel,
    s: &[u64],
    z2: &[f64],
    rho: f64,
    streams: &SweepStreams,
) -> Result<Vec<f64>> {
    let n = model.n();
    if s.len() != n || z2.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: s.len().min(z2.len()),
        });
    }
    let cols = model.op.col_sums();
    let alpha = model.alpha;
    let mut x = vec![0.0; n];
    par_blocks(&mut x, |b, chunk| {
        let mut stream = streams.block(StreamKind::X, b);
        for (k, out) in chunk.iter_mut().enumerate() {
            let j = b * BLOCK + k;
            // Gamma is parameterized by rate here.
            let shape = s[j] as f64 + 1.0 / rho + 1.0;
            let rate = alpha * cols[j] + 1.0 / (rho * z2[j]);
            *out = draw_gamma_unchecked(&mut stream, shape, rate);
        }
    });
    Ok(x)
}

/// Componentwise inverse-gamma draws for `z2`.
pub fn step_z2(x: &[f64], z1: &[f64], rho: f64, streams: &SweepStreams) -> Result<Vec<f64>> {
    if x.len() != z1.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: z1.len(),
        });
    }
    let mut z2 = vec![0.0; x.len()];
    par_blocks(&mut z2, |b, chunk| {
        let mut stream = streams.block(StreamKind::Z2, b);
        for (k, out) in chunk.iter_mut().enumerate() {
            let j = b * BLOCK + k;
            // Inverse gamma is parameterized by scale here.
            *out = draw_invgamma_unchecked(&mut stream, 2.0 / rho, (x[j] + z1[j]) / rho);
        }
    });
    Ok(z2)
}

/// `U(z1) = β g(z1) + Σ log z1 + (1/ρ) Σ (z1/z2 − log z1)`.
pub fn potential_value(z1: &[f64], z2: &[f64], prior: &dyn ScorePrior, rho: f64) -> Result<f64> {
    let g = prior.potential(z1)?;
    let rest: f64 = z1
        .iter()
        .zip(z2)
        .map(|(&a, &b)| a.ln() + (a / b - a.ln()) / rho)
        .sum();
    Ok(prior.beta() * g + rest)
}

/// `∇U(z1) = β ∇g(z1) + 1/(ρ z2) + (1 − 1/ρ)/z1`.
pub fn potential_gradient(
    z1: &[f64],
    z2: &[f64],
    prior: &dyn ScorePrior,
    rho: f64,
    phase: Phase,
) -> Result<Vec<f64>> {
    let score = prior.score_in_phase(z1, phase)?;
    let beta = prior.beta();
    Ok(z1
        .iter()
        .zip(z2)
        .zip(&score)
        .map(|((&a, &b), &g)| beta * g + 1.0 / (rho * b) + (1.0 - 1.0 / rho) / a)
        .collect())
}

#[derive(Debug, Clone)]
pub struct Z1Update {
    pub z1: Vec<f64>,
    /// Component updates whose dual value had to be clamped.
    pub guard_hits: u64,
}

/// `cfg.inner_steps` mirror Langevin updates of `z1` in the Burg geometry:
/// `θ = −1/z1 − γ ∇U(z1) + sqrt(2γ) ε / z1`, then `z1 = −1/θ`.
pub fn step_z1_hrlmc(
    z1: &[f64],
    z2: &[f64],
    prior: &dyn ScorePrior,
    cfg: &SamplerConfig,
    streams: &SweepStreams,
    phase: Phase,
) -> Result<Z1Update> {
    let n = z1.len();
    if z2.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: z2.len(),
        });
    }
    let (rho, gamma, guard) = (cfg.rho, cfg.gamma_step, cfg.theta_guard);
    let beta = prior.beta();
    let noise = (2.0 * gamma).sqrt();
    let coupling = 1.0 - 1.0 / rho;
    let mut current = z1.to_vec();
    let mut blocks: Vec<(RandomStream, u64)> = (0..n_blocks(n))
        .map(|b| (streams.block(StreamKind::Z1, b), 0))
        .collect();

    for _ in 0..cfg.inner_steps {
        let score = prior.score_in_phase(&current, phase)?;
        let update = |b: usize, chunk: &mut [f64], stream: &mut RandomStream, hits: &mut u64| {
            for (k, z) in chunk.iter_mut().enumerate() {
                let j = b * BLOCK + k;
                let inv = 1.0 / *z;
                let grad = beta * score[j] + 1.0 / (rho * z2[j]) + coupling * inv;
                let mut theta = -inv - gamma * grad + noise * inv * stream.std_normal();
                if theta >= -guard {
                    theta = -guard;
                    *hits += 1;
                }
                *z = -1.0 / theta;
            }
        };
        if n <= BLOCK {
            let (stream, hits) = &mut blocks[0];
            update(0, &mut current, stream, hits);
        } else {
            current
                .par_chunks_mut(BLOCK)
                .zip(blocks.par_iter_mut())
                .enumerate()
                .for_each(|(b, (chunk, (stream, hits)))| update(b, chunk, stream, hits));
        }
        if let Some(j) = current.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                what: "mirror Langevin update",
                index: j,
            });
        }
    }
    Ok(Z1Update {
        z1: current,
        guard_hits: blocks.iter().map(|(_, h)| h).sum(),
    })
}

/// Running moments of the post-burn-in `x` samples plus a thinned store.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub count: usize,
    pub thinned: SampleMatrix,
}

impl PosteriorSummary {
    pub fn new(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            count: 0,
            thinned: SampleMatrix::new(n),
        }
    }

    /// Welford update.
    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let k = self.count as f64;
        for ((m, m2), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / k;
            *m2 += d * (v - *m);
        }
    }

    /// Unbiased variance; zero with fewer than two samples.
    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.mean.len()];
        }
        let d = (self.count - 1) as f64;
        self.m2.iter().map(|v| (v / d).max(0.0)).collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance().into_iter().map(f64::sqrt).collect()
    }
}

/// Per-sweep scalar traces and guard counters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticsBundle {
    /// `U(z1)` after each sweep; NaN when the prior has no closed-form potential.
    pub potential_trace: Vec<f64>,
    pub mean_x_trace: Vec<f64>,
    pub pixel_traces: Vec<(usize, Vec<f64>)>,
    pub guard_hits: u64,
    pub guard_checks: u64,
}

impl DiagnosticsBundle {
    pub fn guard_rate(&self) -> f64 {
        if self.guard_checks == 0 {
            0.0
        } else {
            self.guard_hits as f64 / self.guard_checks as f64
        }
    }
}

/// A chain positioned at a sweep index.
pub struct Chain<'a> {
    model: &'a PoissonModel,
    prior: &'a dyn ScorePrior,
    cfg: SamplerConfig,
    state: ChainState,
    sweep: usize,
    guard_hits: u64,
    guard_checks: u64,
}

impl<'a> Chain<'a> {
    pub fn new(
        model: &'a PoissonModel,
        prior: &'a dyn ScorePrior,
        cfg: SamplerConfig,
        init: Option<ChainState>,
    ) -> Result<Self> {
        cfg.validate()?;
        let state = init.unwrap_or_else(|| default_init(model));
        state.validate(model.n())?;
        Ok(Self {
            model,
            prior,
            cfg,
            state,
            sweep: 0,
            guard_hits: 0,
            guard_checks: 0,
        })
    }

    pub fn resume(
        model: &'a PoissonModel,
        prior: &'a dyn ScorePrior,
        cfg: SamplerConfig,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        if ckpt.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint seed {} differs from config seed {}",
                ckpt.seed, cfg.seed
            )));
        }
        let mut chain = Self::new(model, prior, cfg, Some(ckpt.state))?;
        chain.sweep = ckpt.sweep;
        chain.guard_hits = ckpt.guard_hits;
        chain.guard_checks = ckpt.guard_checks;
        Ok(chain)
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn sweep_index(&self) -> usize {
        self.sweep
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn guard_counts(&self) -> (u64, u64) {
        (self.guard_hits, self.guard_checks)
    }

    pub fn phase(&self) -> Phase {
        if self.sweep < self.cfg.n_bi {
            Phase::BurnIn
        } else {
            Phase::Sampling
        }
    }

    /// One sweep: counts, x, z1, z2.
    pub fn step(&mut self) -> Result<()> {
        let t = self.sweep;
        let streams = SweepStreams::new(self.cfg.seed, t as u64);
        let ctx = |step: &'static str| move |e: Error| Error::Step {
            sweep: t,
            step,
            source: Box::new(e),
        };
        let phase = self.phase();
        let rho = self.cfg.rho;

        self.state.s = step_counts(self.model, &self.state.x, &streams).map_err(ctx("counts"))?;
        self.state.x = step_x(self.model, &self.state.s, &self.state.z2, rho, &streams)
            .map_err(ctx("x"))?;
        let up = step_z1_hrlmc(&self.state.z1, &self.state.z2, self.prior, &self.cfg, &streams, phase)
            .map_err(ctx("z1"))?;
        self.state.z1 = up.z1;
        self.guard_hits += up.guard_hits;
        self.guard_checks += (self.cfg.inner_steps * self.state.z1.len()) as u64;
        self.state.z2 = step_z2(&self.state.x, &self.state.z1, rho, &streams).map_err(ctx("z2"))?;
        self.sweep += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.cfg.seed,
            sweep: self.sweep,
            state: self.state.clone(),
            guard_hits: self.guard_hits,
            guard_checks: self.guard_checks,
        }
    }

    /// Runs the remaining sweeps up to `n_mc`, accumulating every sweep
    /// past burn-in.
    pub fn run(&mut self) -> Result<(PosteriorSummary, DiagnosticsBundle)> {
        let n = self.model.n();
        let mut summary = PosteriorSummary::new(n);
        let pixels: Vec<usize> = if self.cfg.trace_pixels.is_empty() {
            vec![n / 2]
        } else {
            self.cfg.trace_pixels.clone()
        };
        if let Some(&p) = pixels.iter().find(|&&p| p >= n) {
            return Err(Error::Config(format!("trace pixel {p} out of range")));
        }
        let mut diag = DiagnosticsBundle {
            pixel_traces: pixels.iter().map(|&p| (p, Vec::new())).collect(),
            ..Default::default()
        };
        let hits0 = self.guard_hits;
        let checks0 = self.guard_checks;
        while self.sweep < self.cfg.n_mc {
            self.step()?;
            let st = &self.state;
            diag.potential_trace
                .push(potential_value(&st.z1, &st.z2, self.prior, self.cfg.rho).unwrap_or(f64::NAN));
            diag.mean_x_trace.push(st.x.iter().sum::<f64>() / n as f64);
            for (p, trace) in diag.pixel_traces.iter_mut() {
                trace.push(st.x[*p]);
            }
            // `self.sweep` now counts completed sweeps; keep t + 1 > n_bi.
            if self.sweep > self.cfg.n_bi {
                let k = self.sweep - self.cfg.n_bi - 1;
                summary.push(&st.x);
                if k.is_multiple_of(self.cfg.thin) {
                    summary.thinned.push(&st.x)?;
                }
            }
        }
        diag.guard_hits = self.guard_hits - hits0;
        diag.guard_checks = self.guard_checks - checks0;
        Ok((summary, diag))
    }
}

/// Runs `cfg.n_mc` sweeps from `init` (or [`default_init`]).
pub fn run_chain(
    model: &PoissonModel,
    prior: &dyn ScorePrior,
    cfg: &SamplerConfig,
    init: Option<ChainState>,
) -> Result<(PosteriorSummary, DiagnosticsBundle)> {
    Chain::new(model, prior, cfg.clone(), init)?.run()
}

const CKPT_MAGIC: &[u8; 8] = b"PSGSCKPT";
const CKPT_VERSION: u32 = 1;

/// Resumable chain position. The substreams of sweep `t` depend only on
/// `(seed, t)`, so the seed and sweep index are the whole stream state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub sweep: usize,
    pub state: ChainState,
    pub guard_hits: u64,
    pub guard_checks: u64,
}

impl Checkpoint {
    /// Layout (little endian): magic `PSGSCKPT`, u32 version, u64 seed,
    /// u64 sweep, u64 guard hits, u64 guard checks, u64 n, then `x`, `s`,
    /// `z1`, `z2` as n-element f64/u64/f64/f64 arrays.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        for v in [
            self.seed,
            self.sweep as u64,
            self.guard_hits,
            self.guard_checks,
            self.state.x.len() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.state.x {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.state.s {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.state.z1.iter().chain(&self.state.z2) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a chain checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut u = || -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let seed = u()?;
        let sweep = u()? as usize;
        let guard_hits = u()?;
        let guard_checks = u()?;
        let n = u()? as usize;
        if n > (1 << 32) {
            return Err(Error::Format(format!("implausible state length {n}")));
        }
        let x = (0..n).map(|_| u().map(f64::from_bits)).collect::<Result<_>>()?;
        let s = (0..n).map(|_| u()).collect::<Result<_>>()?;
        let z1 = (0..n).map(|_| u().map(f64::from_bits)).collect::<Result<_>>()?;
        let z2 = (0..n).map(|_| u().map(f64::from_bits)).collect::<Result<_>>()?;
        let state = ChainState { x, s, z1, z2 };
        state.validate(n)?;
        Ok(Self {
            seed,
            sweep,
            state,
            guard_hits,
            guard_checks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{IdentityOperator, SparseOperator};
    use crate::priors::{FlatPrior, SmoothedTVParams, SmoothedTvPrior, TikhonovPrior};

    fn identity_model(y: Vec<u64>, alpha: f64) -> PoissonModel {
        let n = y.len();
        PoissonModel::new(y, alpha, Arc::new(IdentityOperator::new(n))).unwrap()
    }

    #[test]
    fn counts_zero_observation() {
        let m = identity_model(vec![0; 5], 1.0);
        let s = step_counts(&m, &[1.0; 5], &SweepStreams::new(1, 0)).unwrap();
        assert_eq!(s, vec![0; 5]);
    }

    #[test]
    fn counts_identity_is_exact() {
        let y = vec![3, 0, 7, 1, 12];
        let m = identity_model(y.clone(), 2.0);
        let s = step_counts(&m, &[0.5, 1.0, 2.0, 3.0, 4.0], &SweepStreams::new(2, 0)).unwrap();
        assert_eq!(s, y);
    }

    #[test]
    fn counts_split_proportionally() {
        let op = SparseOperator::from_dense(1, 2, &[1.0, 1.0]).unwrap();
        let total = 300_000u64;
        let m = PoissonModel::new(vec![total], 1.0, Arc::new(op)).unwrap();
        let s = step_counts(&m, &[1.0, 2.0], &SweepStreams::new(3, 0)).unwrap();
        assert_eq!(s.iter().sum::<u64>(), total);
        let se = (2.0f64 / 9.0 / total as f64).sqrt();
        assert!((s[0] as f64 / total as f64 - 1.0 / 3.0).abs() < 3.0 * se);
    }

    #[test]
    fn counts_conserve_total_on_many_rows() {
        let k = crate::operators::gaussian_kernel(5, 1.0).unwrap();
        let op = crate::operators::ConvolutionOperator::new(
            k,
            (5, 5),
            (48, 48),
            crate::operators::Boundary::ZeroPad,
        )
        .unwrap();
        let mut st = RandomStream::new(4, 0);
        let y: Vec<u64> = (0..48 * 48).map(|_| (st.uniform() * 20.0) as u64).collect();
        let total: u64 = y.iter().sum();
        let m = PoissonModel::new(y, 1.0, Arc::new(op)).unwrap();
        let x: Vec<f64> = (0..48 * 48).map(|_| 0.1 + st.uniform()).collect();
        for t in 0..5 {
            let s = step_counts(&m, &x, &SweepStreams::new(4, t)).unwrap();
            assert_eq!(s.iter().sum::<u64>(), total);
        }
    }

    #[test]
    fn model_rejects_count_on_empty_row() {
        let op = SparseOperator::from_dense(2, 2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            PoissonModel::new(vec![1, 2], 1.0, Arc::new(op)),
            Err(Error::Model(_))
        ));
        let op = SparseOperator::from_dense(2, 2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(PoissonModel::new(vec![1, 0], 1.0, Arc::new(op)).is_ok());
    }

    #[test]
    fn x_conditional_mean() {
        let m = identity_model(vec![10; 4], 1.0);
        let (rho, n) = (0.1, 100_000);
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for t in 0..n / 4 {
            let x = step_x(&m, &[10; 4], &[1.0; 4], rho, &SweepStreams::new(5, t as u64)).unwrap();
            for v in x {
                acc += v;
                acc2 += v * v;
            }
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        let expect = 21.0 / 11.0;
        assert!((mean - expect).abs() < 3.0 * (var / n as f64).sqrt(), "{mean} vs {expect}");
    }

    #[test]
    fn z2_symmetric_in_arguments() {
        let s = SweepStreams::new(6, 0);
        let a = step_z2(&[1.0, 2.0], &[3.0, 0.5], 0.2, &s).unwrap();
        let b = step_z2(&[3.0, 0.5], &[1.0, 2.0], 0.2, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn z2_rho_one_mean() {
        let (x, z1) = (0.7, 1.8);
        let n = 200_000;
        let draws: Vec<f64> = (0..n / 8)
            .flat_map(|t| step_z2(&[x; 8], &[z1; 8], 1.0, &SweepStreams::new(7, t as u64)).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        // IG(2, 2.5) has infinite variance; a loose bound on the mean suffices.
        assert!((mean - (x + z1)).abs() < 0.1, "{mean}");
    }

    #[test]
    fn null_step_keeps_z1() {
        let mut cfg = SamplerConfig::new(0.5, 1e-300, 2, 0, 1);
        cfg.inner_steps = 3;
        let z1 = vec![0.3, 1.0, 5.0];
        let up = step_z1_hrlmc(&z1, &[1.0; 3], &FlatPrior::default(), &cfg, &SweepStreams::new(8, 0), Phase::Sampling)
            .unwrap();
        for (a, b) in up.z1.iter().zip(&z1) {
            assert!(((a - b) / b).abs() < 1e-14);
        }
        assert_eq!(up.guard_hits, 0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut st = RandomStream::new(9, 0);
        let (h, w) = (4, 4);
        let priors: Vec<Box<dyn ScorePrior>> = vec![
            Box::new(FlatPrior::default()),
            Box::new(TikhonovPrior { center: vec![1.0; 16], beta: 2.5 }),
            Box::new(SmoothedTvPrior::new(SmoothedTVParams { epsilon: 0.3, beta: 4.0 }, h, w).unwrap()),
        ];
        for prior in &priors {
            for &rho in &[0.05, 0.5, 2.0] {
                let z1: Vec<f64> = (0..16).map(|_| 0.3 + st.uniform()).collect();
                let z2: Vec<f64> = (0..16).map(|_| 0.3 + st.uniform()).collect();
                let g = potential_gradient(&z1, &z2, prior.as_ref(), rho, Phase::Sampling).unwrap();
                let mut zp = z1.clone();
                for j in 0..16 {
                    let hj = 1e-6 * z1[j];
                    zp[j] = z1[j] + hj;
                    let up = potential_value(&zp, &z2, prior.as_ref(), rho).unwrap();
                    zp[j] = z1[j] - hj;
                    let dn = potential_value(&zp, &z2, prior.as_ref(), rho).unwrap();
                    zp[j] = z1[j];
                    let fd = (up - dn) / (2.0 * hj);
                    assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "{fd} vs {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn beta_applied_once() {
        let prior = TikhonovPrior { center: vec![0.0; 2], beta: 3.0 };
        let g = potential_gradient(&[2.0, 4.0], &[1.0, 1.0], &prior, 1.0, Phase::Sampling).unwrap();
        // rho = 1: the coupling terms reduce to 1/z2 = 1.
        assert_eq!(g, vec![3.0 * 2.0 + 1.0, 3.0 * 4.0 + 1.0]);
    }

    #[test]
    fn default_init_examples() {
        let st = default_init(&identity_model(vec![0; 4], 2.0));
        assert_eq!(st, ChainState::constant(4, 1e-3));
        let st = default_init(&identity_model(vec![6; 4], 1.0));
        assert_eq!(st.x, vec![6.0; 4]);
        st.validate(4).unwrap();
    }

    #[test]
    fn single_post_burn_in_sample() {
        let m = identity_model(vec![4, 9, 2], 1.0);
        let cfg = SamplerConfig::new(0.5, 1e-3, 6, 5, 11);
        let prior = FlatPrior::default();
        let mut chain = Chain::new(&m, &prior, cfg, None).unwrap();
        let (summary, diag) = chain.run().unwrap();
        assert_eq!(summary.count, 1);
        assert_eq!(summary.thinned.len(), 1);
        assert_eq!(summary.mean, chain.state().x);
        assert_eq!(diag.mean_x_trace.len(), 6);
    }

    #[test]
    fn chain_is_deterministic_and_positive() {
        let m = identity_model((0..2500).map(|k| (k % 17) as u64).collect(), 3.0);
        let prior = SmoothedTvPrior::new(SmoothedTVParams { epsilon: 0.1, beta: 1.0 }, 50, 50).unwrap();
        let mut cfg = SamplerConfig::new(0.2, 1e-3, 30, 10, 99);
        cfg.thin = 4;
        let a = run_chain(&m, &prior, &cfg, None).unwrap();
        let b = run_chain(&m, &prior, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert!(a.0.mean.iter().all(|&v| v > 0.0));
        assert_eq!(a.0.thinned.len(), 5);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::new(0.5, 1e-3, 10, 10, 0).validate().is_err());
        assert!(SamplerConfig::new(0.0, 1e-3, 10, 1, 0).validate().is_err());
        assert!(SamplerConfig::new(0.5, 0.0, 10, 1, 0).validate().is_err());
        SamplerConfig::new(0.5, 1e-3, 10, 9, 0).validate().unwrap();
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let m = identity_model(vec![3, 1, 4, 1, 5, 9, 2, 6], 1.5);
        let prior = FlatPrior::default();
        let cfg = SamplerConfig::new(0.3, 1e-2, 40, 10, 5);

        let mut full = Chain::new(&m, &prior, cfg.clone(), None).unwrap();
        for _ in 0..40 {
            full.step().unwrap();
        }

        let mut first = Chain::new(&m, &prior, cfg.clone(), None).unwrap();
        for _ in 0..17 {
            first.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.ckpt");
        first.checkpoint().save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, first.checkpoint());
        let mut second = Chain::resume(&m, &prior, cfg, ck).unwrap();
        while second.sweep_index() < 40 {
            second.step().unwrap();
        }
        assert_eq!(second.state(), full.state());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let mut bytes: &[u8] = b"NOTACKPTxxxxxxxxxxxxxxxxxxxxxxxxxxxxxx";
        assert!(matches!(Checkpoint::read_from(&mut bytes), Err(Error::Format(_))));
    }

    #[test]
    fn backprojection_init_inverts_identity_and_blur_mean() {
        let m = identity_model(vec![0, 4, 10], 2.0);
        let st = backprojection_init(&m, 1e-3).unwrap();
        assert_eq!(st.x, vec![1e-3, 2.0, 5.0]);
        st.validate(3).unwrap();
        // Rows (1,1) and (0,1): column 1 collects both rows.
        let op = SparseOperator::from_dense(2, 2, &[1.0, 1.0, 0.0, 1.0]).unwrap();
        let m = PoissonModel::new(vec![3, 1], 1.0, Arc::new(op)).unwrap();
        let st = backprojection_init(&m, 1e-3).unwrap();
        assert!((st.x[0] - 3.0).abs() < 1e-15 && (st.x[1] - 2.0).abs() < 1e-15);
    }
}
