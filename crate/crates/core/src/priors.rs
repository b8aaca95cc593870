//! Score-based priors `∇g` for the mirror Langevin step.
//!
//! A prior carries its weight `β` but [`ScorePrior::score`] never applies it;
//! the potential assembly in the sampler multiplies by `β` exactly once.
//!
//! Built-ins: [`FlatPrior`], [`TikhonovPrior`], [`SmoothedTvPrior`] and
//! [`RedPrior`], the latter over any [`Denoiser`] (linear smoothers ship here,
//! external programs plug in through [`ExternalDenoiser`]).

use std::fmt;
use std::path::PathBuf;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::experiments::image::{read_raw_f32, write_raw_f32};
use crate::operators::{gaussian_kernel, Boundary, ConvolutionOperator, ForwardOperator};

/// Chain phase, used by priors whose denoiser strength is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    BurnIn,
    Sampling,
}

pub trait ScorePrior: Send + Sync + fmt::Debug {
    /// Regularization weight `β`.
    fn beta(&self) -> f64;

    fn descriptor(&self) -> String;

    /// `∇g(x)`, without `β`.
    fn score(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn score_in_phase(&self, x: &[f64], _phase: Phase) -> Result<Vec<f64>> {
        self.score(x)
    }

    /// `g(x)`, without `β`. Priors defined only through their score
    /// return [`Error::Degenerate`].
    fn potential(&self, x: &[f64]) -> Result<f64>;
}

fn check_positive(x: &[f64]) -> Result<()> {
    if let Some(i) = x.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("prior argument {i} = {} is not positive", x[i])));
    }
    Ok(())
}

fn check_finite(v: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    match v.iter().position(|s| !s.is_finite()) {
        Some(index) => Err(Error::Numerical { what, index }),
        None => Ok(v),
    }
}

/// `g ≡ 0`.
#[derive(Debug, Clone)]
pub struct FlatPrior {
    pub beta: f64,
}

impl Default for FlatPrior {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

impl ScorePrior for FlatPrior {
    fn beta(&self) -> f64 {
        self.beta
    }

    fn descriptor(&self) -> String {
        "flat".into()
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_positive(x)?;
        Ok(vec![0.0; x.len()])
    }

    fn potential(&self, x: &[f64]) -> Result<f64> {
        check_positive(x)?;
        Ok(0.0)
    }
}

/// `g(x) = ½‖x − c‖²`.
#[derive(Debug, Clone)]
pub struct TikhonovPrior {
    pub center: Vec<f64>,
    pub beta: f64,
}

impl ScorePrior for TikhonovPrior {
    fn beta(&self) -> f64 {
        self.beta
    }

    fn descriptor(&self) -> String {
        format!("tikhonov(beta={})", self.beta)
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_positive(x)?;
        if x.len() != self.center.len() {
            return Err(Error::LengthMismatch {
                expected: self.center.len(),
                got: x.len(),
            });
        }
        check_finite(x.iter().zip(&self.center).map(|(a, c)| a - c).collect(), "tikhonov score")
    }

    fn potential(&self, x: &[f64]) -> Result<f64> {
        let s = self.score(x)?;
        Ok(0.5 * s.iter().map(|v| v * v).sum::<f64>())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedTVParams {
    pub epsilon: f64,
    pub beta: f64,
}

/// `g(x) = Σ_p sqrt(|∇_h x|² + |∇_v x|² + ε²)` with periodic forward differences.
#[derive(Debug, Clone)]
pub struct SmoothedTvPrior {
    params: SmoothedTVParams,
    height: usize,
    width: usize,
}

impl SmoothedTvPrior {
    pub fn new(params: SmoothedTVParams, height: usize, width: usize) -> Result<Self> {
        if !(params.epsilon > 0.0) {
            return Err(Error::Domain(format!("TV epsilon {} must be > 0", params.epsilon)));
        }
        if !(params.beta > 0.0) {
            return Err(Error::Domain(format!("TV beta {} must be > 0", params.beta)));
        }
        if height == 0 || width == 0 {
            return Err(Error::Domain("TV image shape must be non-empty".into()));
        }
        Ok(Self {
            params,
            height,
            width,
        })
    }

    fn check_shape(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.height * self.width {
            return Err(Error::LengthMismatch {
                expected: self.height * self.width,
                got: x.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn diffs(&self, x: &[f64], r: usize, c: usize) -> (f64, f64, usize, usize) {
        let w = self.width;
        let right = r * w + (c + 1) % w;
        let down = ((r + 1) % self.height) * w + c;
        let v = x[r * w + c];
        (x[right] - v, x[down] - v, right, down)
    }
}

/// Gradient of the smoothed TV potential on a `height x width` image.
pub fn smoothed_tv_score(p: SmoothedTVParams, img: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    SmoothedTvPrior::new(p, height, width)?.score(img)
}

impl ScorePrior for SmoothedTvPrior {
    fn beta(&self) -> f64 {
        self.params.beta
    }

    fn descriptor(&self) -> String {
        format!("smoothed-tv(beta={}, eps={})", self.params.beta, self.params.epsilon)
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_positive(x)?;
        self.check_shape(x)?;
        let eps2 = self.params.epsilon * self.params.epsilon;
        let mut g = vec![0.0; x.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                let (dh, dv, right, down) = self.diffs(x, r, c);
                let inv = 1.0 / (dh * dh + dv * dv + eps2).sqrt();
                g[r * self.width + c] -= (dh + dv) * inv;
                g[right] += dh * inv;
                g[down] += dv * inv;
            }
        }
        check_finite(g, "smoothed-tv score")
    }

    fn potential(&self, x: &[f64]) -> Result<f64> {
        check_positive(x)?;
        self.check_shape(x)?;
        let eps2 = self.params.epsilon * self.params.epsilon;
        let mut acc = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                let (dh, dv, _, _) = self.diffs(x, r, c);
                acc += (dh * dh + dv * dv + eps2).sqrt();
            }
        }
        Ok(acc)
    }
}

/// Denoising map `D_ν` with a declared Lipschitz bound.
pub trait Denoiser: Send + Sync + fmt::Debug {
    fn strength(&self) -> f64;
    fn lipschitz(&self) -> f64;
    fn denoise(&self, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn strength(&self) -> f64 {
        0.0
    }

    fn lipschitz(&self) -> f64 {
        1.0
    }

    fn denoise(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }
}

/// Periodic convolution with a nonnegative, point-symmetric stencil.
/// Such an operator is symmetric with Lipschitz constant equal to the
/// stencil mass.
#[derive(Debug)]
pub struct LinearSmoothingDenoiser {
    strength: f64,
    mass: f64,
    op: ConvolutionOperator,
}

impl LinearSmoothingDenoiser {
    /// Gaussian blur with standard deviation `sigma` pixels (the strength),
    /// truncated at three standard deviations.
    pub fn gaussian(sigma: f64, height: usize, width: usize) -> Result<Self> {
        let size = 2 * (3.0 * sigma).ceil().max(1.0) as usize + 1;
        let k = gaussian_kernel(size, sigma)?;
        Self::from_kernel(sigma, k, (size, size), height, width)
    }

    /// Uniform `size x size` averaging.
    pub fn boxcar(size: usize, height: usize, width: usize) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Domain("box size must be odd".into()));
        }
        let k = vec![1.0 / (size * size) as f64; size * size];
        Self::from_kernel(size as f64, k, (size, size), height, width)
    }

    pub fn from_kernel(
        strength: f64,
        kernel: Vec<f64>,
        kernel_shape: (usize, usize),
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let (kh, kw) = kernel_shape;
        if kh % 2 == 0 || kw % 2 == 0 || kernel.len() != kh * kw {
            return Err(Error::Domain("smoothing stencil needs odd sides".into()));
        }
        let n = kernel.len();
        if (0..n).any(|t| (kernel[t] - kernel[n - 1 - t]).abs() > 1e-15) {
            return Err(Error::Domain("smoothing stencil must be point-symmetric".into()));
        }
        let mass = kernel.iter().sum();
        let op = ConvolutionOperator::new(kernel, kernel_shape, (height, width), Boundary::Periodic)?;
        Ok(Self { strength, mass, op })
    }
}

impl Denoiser for LinearSmoothingDenoiser {
    fn strength(&self) -> f64 {
        self.strength
    }

    fn lipschitz(&self) -> f64 {
        self.mass
    }

    fn denoise(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.op.apply(x)
    }
}

/// Runs a user command on the current image through the raw float format:
/// the command receives `<input> <output>` paths appended to its arguments
/// and the strength in the `PSGS_STRENGTH` environment variable. Calls are
/// serialized.
#[derive(Debug)]
pub struct ExternalDenoiser {
    pub program: String,
    pub args: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub strength: f64,
    pub lipschitz: f64,
    pub timeout: Duration,
    workdir: PathBuf,
    lock: Mutex<u64>,
}

impl ExternalDenoiser {
    pub fn new(
        program: impl Into<String>,
        args: Vec<String>,
        shape: (usize, usize),
        strength: f64,
        lipschitz: f64,
        timeout: Duration,
    ) -> Self {
        Self {
            program: program.into(),
            args,
            height: shape.0,
            width: shape.1,
            strength,
            lipschitz,
            timeout,
            workdir: std::env::temp_dir(),
            lock: Mutex::new(0),
        }
    }

    pub fn with_workdir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.workdir = dir.into();
        self
    }
}

impl Denoiser for ExternalDenoiser {
    fn strength(&self) -> f64 {
        self.strength
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn denoise(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.height * self.width {
            return Err(Error::LengthMismatch {
                expected: self.height * self.width,
                got: x.len(),
            });
        }
        let mut calls = self.lock.lock().map_err(|_| Error::Denoiser("hook lock poisoned".into()))?;
        *calls += 1;
        let tag = format!("psgs-{}-{}", std::process::id(), *calls);
        let input = self.workdir.join(format!("{tag}-in.raw"));
        let output = self.workdir.join(format!("{tag}-out.raw"));
        write_raw_f32(&input, self.height, self.width, x)?;

        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&output)
            .env("PSGS_STRENGTH", self.strength.to_string())
            .spawn()
            .map_err(|e| Error::Denoiser(format!("cannot start {}: {e}", self.program)))?;
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                let _ = std::fs::remove_file(&input);
                return Err(Error::Denoiser(format!("{} timed out", self.program)));
            }
            std::thread::sleep(Duration::from_millis(2));
        };
        let _ = std::fs::remove_file(&input);
        if !status.success() {
            return Err(Error::Denoiser(format!("{} exited with {status}", self.program)));
        }
        let (h, w, data) = read_raw_f32(&output)?;
        let _ = std::fs::remove_file(&output);
        if (h, w) != (self.height, self.width) {
            return Err(Error::Denoiser(format!(
                "hook returned a {h}x{w} image, expected {}x{}",
                self.height, self.width
            )));
        }
        check_finite(data, "external denoiser output")
    }
}

/// `x − D(x)`.
pub fn red_score(d: &dyn Denoiser, x: &[f64]) -> Result<Vec<f64>> {
    let dx = d.denoise(x)?;
    if dx.len() != x.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: dx.len(),
        });
    }
    check_finite(x.iter().zip(&dx).map(|(a, b)| a - b).collect(), "RED score")
}

/// Regularization by denoising, `g(x) = ½ xᵀ(x − D(x))`, with one denoiser
/// during burn-in and another afterwards. Its score `x − D(x)` is the
/// gradient of `g` only for locally homogeneous denoisers with symmetric
/// Jacobian; that is assumed, not checked.
#[derive(Debug, Clone)]
pub struct RedPrior {
    pub beta: f64,
    burn_in: Arc<dyn Denoiser>,
    sampling: Arc<dyn Denoiser>,
}

impl RedPrior {
    pub fn new(beta: f64, denoiser: Arc<dyn Denoiser>) -> Self {
        Self {
            beta,
            burn_in: denoiser.clone(),
            sampling: denoiser,
        }
    }

    pub fn with_schedule(beta: f64, burn_in: Arc<dyn Denoiser>, sampling: Arc<dyn Denoiser>) -> Self {
        Self {
            beta,
            burn_in,
            sampling,
        }
    }

    pub fn denoiser(&self, phase: Phase) -> &dyn Denoiser {
        match phase {
            Phase::BurnIn => self.burn_in.as_ref(),
            Phase::Sampling => self.sampling.as_ref(),
        }
    }
}

impl ScorePrior for RedPrior {
    fn beta(&self) -> f64 {
        self.beta
    }

    fn descriptor(&self) -> String {
        format!(
            "red(beta={}, nu=({}, {}))",
            self.beta,
            self.burn_in.strength(),
            self.sampling.strength()
        )
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.score_in_phase(x, Phase::Sampling)
    }

    fn score_in_phase(&self, x: &[f64], phase: Phase) -> Result<Vec<f64>> {
        check_positive(x)?;
        red_score(self.denoiser(phase), x)
    }

    fn potential(&self, x: &[f64]) -> Result<f64> {
        let s = self.score(x)?;
        Ok(0.5 * x.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>())
    }
}

/// Relative strong-convexity and smoothness constants of the mirror
/// Langevin potential under a RED prior with bounded iterates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceConstants {
    pub m: f64,
    pub big_m: f64,
    pub rho_max: f64,
}

/// Constants for iterates confined to `[eps_z, c_z]` and an `l_d`-Lipschitz
/// denoiser.
pub fn check_convergence_constants(
    eps_z: f64,
    c_z: f64,
    beta: f64,
    rho: f64,
    l_d: f64,
) -> Result<ConvergenceConstants> {
    if !(eps_z > 0.0) || !(c_z > 0.0) || eps_z > c_z {
        return Err(Error::Domain(format!("need 0 < eps_z <= C_z, got {eps_z}, {c_z}")));
    }
    if !(beta > 0.0) || !(rho > 0.0) || !(l_d >= 0.0) {
        return Err(Error::Domain("beta and rho must be > 0 and L_D >= 0".into()));
    }
    let e4 = eps_z.powi(4);
    let c2 = c_z * c_z;
    let m = 1.0 / rho - 1.0 + beta * (e4 / c2 - l_d * c2);
    let big_m = beta * (1.0 + l_d) * c2 + (1.0 / rho - 1.0).abs();
    let rho_max = if e4 / (c2 * c2) <= l_d {
        1.0 / (1.0 + beta * (l_d * c2 - e4 / c2))
    } else {
        1.0
    };
    Ok(ConvergenceConstants { m, big_m, rho_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngdist::RandomStream;

    fn random_image(s: &mut RandomStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| 0.2 + s.uniform()).collect()
    }

    fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|j| {
                xp[j] = x[j] + h;
                let fp = f(&xp);
                xp[j] = x[j] - h;
                let fm = f(&xp);
                xp[j] = x[j];
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn flat_and_tikhonov_examples() {
        assert_eq!(FlatPrior::default().score(&[0.3, 9.0]).unwrap(), vec![0.0, 0.0]);
        let t = TikhonovPrior {
            center: vec![1.0, 1.0],
            beta: 3.0,
        };
        assert_eq!(t.score(&[2.0, 3.0]).unwrap(), vec![1.0, 2.0]);
        assert!(t.score(&[2.0, -3.0]).is_err());
    }

    #[test]
    fn red_with_averaging_kills_constants() {
        let d = LinearSmoothingDenoiser::boxcar(3, 6, 6).unwrap();
        let prior = RedPrior::new(1.0, Arc::new(d));
        let s = prior.score(&[1.0; 36]).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn red_identity_denoiser_is_zero() {
        let s = red_score(&IdentityDenoiser, &[0.5, 2.0, 7.0]).unwrap();
        assert_eq!(s, vec![0.0; 3]);
    }

    #[test]
    fn red_gaussian_impulse_response() {
        let (h, w) = (9, 9);
        let d = LinearSmoothingDenoiser::gaussian(1.0, h, w).unwrap();
        let mut img = vec![0.0; h * w];
        img[4 * w + 4] = 1.0;
        let s = red_score(&d, &img).unwrap();
        let k = gaussian_kernel(7, 1.0).unwrap();
        for r in 0..h {
            for c in 0..w {
                let (dr, dc) = (r as isize - 4, c as isize - 4);
                let kv = if dr.abs() <= 3 && dc.abs() <= 3 {
                    k[((dr + 3) * 7 + dc + 3) as usize]
                } else {
                    0.0
                };
                let expect = img[r * w + c] - kv;
                assert!((s[r * w + c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn smoothing_denoiser_lipschitz_audit() {
        let d = LinearSmoothingDenoiser::gaussian(1.3, 8, 8).unwrap();
        let l = d.lipschitz();
        assert!((l - 1.0).abs() < 1e-12);
        let mut s = RandomStream::new(31, 0);
        for _ in 0..10_000 {
            let a = random_image(&mut s, 64);
            let b = random_image(&mut s, 64);
            let (da, db) = (d.denoise(&a).unwrap(), d.denoise(&b).unwrap());
            let num: f64 = da.iter().zip(&db).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let den: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            assert!(num / den <= l + 1e-9);
        }
    }

    #[test]
    fn red_linear_symmetric_is_gradient_of_potential() {
        let d = LinearSmoothingDenoiser::gaussian(0.8, 6, 7).unwrap();
        let prior = RedPrior::new(1.0, Arc::new(d));
        let mut s = RandomStream::new(32, 0);
        for _ in 0..20 {
            let x = random_image(&mut s, 42);
            let g = prior.score(&x).unwrap();
            // g(x) is quadratic, so central differences are exact up to rounding.
            let fd = fd_gradient(|v| prior.potential(v).unwrap(), &x, 1e-3);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tv_constant_image_has_zero_score() {
        let p = SmoothedTVParams { epsilon: 0.1, beta: 1.0 };
        let s = smoothed_tv_score(p, &[0.7; 25], 5, 5).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tv_matches_finite_differences() {
        let p = SmoothedTVParams { epsilon: 0.05, beta: 1.0 };
        let prior = SmoothedTvPrior::new(p, 8, 8).unwrap();
        let mut s = RandomStream::new(33, 0);
        let x = random_image(&mut s, 64);
        let g = prior.score(&x).unwrap();
        let fd = fd_gradient(|v| prior.potential(v).unwrap(), &x, 1e-6);
        let dev = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-5, "max deviation {dev}");
    }

    #[test]
    fn tv_checkerboard_alternates() {
        let p = SmoothedTVParams { epsilon: 0.01, beta: 1.0 };
        let (h, w) = (6, 6);
        let img: Vec<f64> = (0..h * w)
            .map(|i| if (i / w + i % w) % 2 == 0 { 1.0 } else { 0.5 })
            .collect();
        let s = smoothed_tv_score(p, &img, h, w).unwrap();
        for (i, &v) in s.iter().enumerate() {
            if img[i] > 0.75 {
                assert!(v > 0.0);
            } else {
                assert!(v < 0.0);
            }
        }
    }

    #[test]
    fn analytic_priors_match_fd_relative() {
        let mut s = RandomStream::new(34, 0);
        let priors: Vec<Box<dyn ScorePrior>> = vec![
            Box::new(FlatPrior::default()),
            Box::new(TikhonovPrior {
                center: vec![0.5; 36],
                beta: 1.0,
            }),
            Box::new(SmoothedTvPrior::new(SmoothedTVParams { epsilon: 0.2, beta: 1.0 }, 6, 6).unwrap()),
        ];
        for p in &priors {
            for _ in 0..10 {
                let x = random_image(&mut s, 36);
                let g = p.score(&x).unwrap();
                let fd = fd_gradient(|v| p.potential(v).unwrap(), &x, 1e-6);
                let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-5 * scale, "{}: {a} vs {b}", p.descriptor());
                }
            }
        }
    }

    #[test]
    fn red_schedule_switches_denoiser() {
        let burn: Arc<dyn Denoiser> = Arc::new(LinearSmoothingDenoiser::gaussian(2.0, 8, 8).unwrap());
        let samp: Arc<dyn Denoiser> = Arc::new(IdentityDenoiser);
        let prior = RedPrior::with_schedule(1.0, burn, samp);
        let mut s = RandomStream::new(35, 0);
        let x = random_image(&mut s, 64);
        let a = prior.score_in_phase(&x, Phase::BurnIn).unwrap();
        let b = prior.score_in_phase(&x, Phase::Sampling).unwrap();
        assert!(a.iter().any(|v| v.abs() > 1e-6));
        assert!(b.iter().all(|&v| v == 0.0));
        assert_eq!(prior.descriptor(), "red(beta=1, nu=(2, 0))");
    }

    #[test]
    fn convergence_constant_examples() {
        let c = check_convergence_constants(0.5, 1.0, 1.0, 0.5, 0.0).unwrap();
        assert!((c.m - 1.0625).abs() < 1e-12);
        assert!((c.big_m - 2.0).abs() < 1e-12);
        assert_eq!(c.rho_max, 1.0);

        let l = 0.5f64.powi(4);
        let c = check_convergence_constants(0.5, 1.0, 3.0, 0.25, l).unwrap();
        assert!((c.m - (1.0 / 0.25 - 1.0)).abs() < 1e-12);

        let c = check_convergence_constants(0.5, 1.0, 2.0, 0.1, 1.0).unwrap();
        assert!((c.rho_max - 1.0 / 2.875).abs() < 1e-12);

        assert!(check_convergence_constants(2.0, 1.0, 1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn strong_convexity_positive_below_rho_max() {
        for &eps in &[0.1, 0.4, 0.9] {
            for &beta in &[0.1, 1.0, 10.0] {
                for &l in &[0.0, 0.01, 0.5, 2.0] {
                    for k in 1..=20 {
                        let rho = k as f64 / 20.0;
                        let c = check_convergence_constants(eps, 1.0, beta, rho, l).unwrap();
                        if rho < c.rho_max && rho <= 1.0 {
                            assert!(c.m > 0.0, "eps {eps} beta {beta} L {l} rho {rho}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn external_denoiser_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        // `cp in out` is an identity denoiser speaking the raw format.
        let d = ExternalDenoiser::new("cp", vec![], (2, 3), 1.0, 1.0, Duration::from_secs(10))
            .with_workdir(dir.path());
        let x = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
        assert_eq!(d.denoise(&x).unwrap(), x.to_vec());

        let bad = ExternalDenoiser::new("false", vec![], (2, 3), 1.0, 1.0, Duration::from_secs(10))
            .with_workdir(dir.path());
        assert!(matches!(bad.denoise(&x), Err(Error::Denoiser(_))));

        let slow = ExternalDenoiser::new(
            "sh",
            vec!["-c".into(), "sleep 5".into()],
            (2, 3),
            1.0,
            1.0,
            Duration::from_millis(100),
        )
        .with_workdir(dir.path());
        assert!(matches!(slow.denoise(&x), Err(Error::Denoiser(_))));

        let picky = |strength| {
            ExternalDenoiser::new(
                "sh",
                vec!["-c".into(), r#"test "$PSGS_STRENGTH" = 2.5 && cp "$0" "$1""#.into()],
                (2, 3),
                strength,
                1.0,
                Duration::from_secs(10),
            )
            .with_workdir(dir.path())
        };
        assert_eq!(picky(2.5).denoise(&x).unwrap(), x.to_vec());
        assert!(picky(1.0).denoise(&x).is_err());
    }
}
