//! Python bindings. Images cross the boundary as flat row-major lists.

use std::path::PathBuf;
use std::sync::Arc;

use poisson_sgs::diagnostics::{psnr as psnr_db, ssim as ssim_index};
use poisson_sgs::experiments::{self, derive_seed, ExperimentConfig};
use poisson_sgs::operators::{
    build_projector, gaussian_kernel, Boundary, ConvolutionOperator, IdentityOperator, ProjectorGeometry,
};
use poisson_sgs::priors::{
    check_convergence_constants as constants, FlatPrior, LinearSmoothingDenoiser, RedPrior, SmoothedTVParams,
    SmoothedTvPrior, TikhonovPrior,
};
use poisson_sgs::rngdist::StreamKind;
use poisson_sgs::sampler::backprojection_init;
use poisson_sgs::validation::run_oracle_battery;
use poisson_sgs::{ChainState, Error, ForwardOperator, PoissonModel, RandomStream, ScorePrior};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(poisson_sgs, SamplerError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Range { .. } | Error::LengthMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => SamplerError::new_err(other.to_string()),
    }
}

/// Linear forward operator `H`.
#[pyclass(name = "Operator", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyOperator {
    inner: Arc<dyn ForwardOperator>,
}

#[pymethods]
impl PyOperator {
    #[staticmethod]
    fn identity(n: usize) -> Self {
        Self { inner: Arc::new(IdentityOperator::new(n)) }
    }

    /// Gaussian blur of an `height × width` image.
    #[staticmethod]
    #[pyo3(signature = (height, width, kernel_size = 9, sigma = 1.6, periodic = true))]
    fn blur(height: usize, width: usize, kernel_size: usize, sigma: f64, periodic: bool) -> PyResult<Self> {
        let k = gaussian_kernel(kernel_size, sigma).map_err(err)?;
        let boundary = if periodic { Boundary::Periodic } else { Boundary::ZeroPad };
        let op = ConvolutionOperator::new(k, (kernel_size, kernel_size), (height, width), boundary).map_err(err)?;
        Ok(Self { inner: Arc::new(op) })
    }

    /// Parallel-beam projector with angles uniform in `[0, π)`.
    #[staticmethod]
    #[pyo3(signature = (height, width, angles, detectors = None))]
    fn tomography(height: usize, width: usize, angles: usize, detectors: Option<usize>) -> PyResult<Self> {
        let mut g = ProjectorGeometry::uniform(height, width, angles);
        if let Some(d) = detectors {
            g.detector_count = d;
        }
        Ok(Self { inner: Arc::new(build_projector(g).map_err(err)?) })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.nrows(), self.inner.ncols())
    }

    fn apply(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.apply(&x).map_err(err)
    }

    fn col_sums(&self) -> Vec<f64> {
        self.inner.col_sums().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Operator(shape={:?})", self.shape())
    }
}

/// Score-based prior on `z1`.
#[pyclass(name = "Prior", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPrior {
    inner: Arc<dyn ScorePrior>,
}

#[pymethods]
impl PyPrior {
    #[staticmethod]
    #[pyo3(signature = (beta = 1.0))]
    fn flat(beta: f64) -> Self {
        Self { inner: Arc::new(FlatPrior { beta }) }
    }

    #[staticmethod]
    fn tikhonov(center: Vec<f64>, beta: f64) -> Self {
        Self { inner: Arc::new(TikhonovPrior { center, beta }) }
    }

    #[staticmethod]
    #[pyo3(signature = (height, width, beta, epsilon = 0.01))]
    fn tv(height: usize, width: usize, beta: f64, epsilon: f64) -> PyResult<Self> {
        let p = SmoothedTvPrior::new(SmoothedTVParams { epsilon, beta }, height, width).map_err(err)?;
        Ok(Self { inner: Arc::new(p) })
    }

    /// RED with a Gaussian smoothing denoiser of width `sigma`.
    #[staticmethod]
    #[pyo3(signature = (height, width, beta, sigma = 1.0))]
    fn red(height: usize, width: usize, beta: f64, sigma: f64) -> PyResult<Self> {
        let d = LinearSmoothingDenoiser::gaussian(sigma, height, width).map_err(err)?;
        Ok(Self { inner: Arc::new(RedPrior::new(beta, Arc::new(d))) })
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }

    /// `∇g(x)`, without the β factor.
    fn score(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.score(&x).map_err(err)
    }

    fn potential(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.potential(&x).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Prior({})", self.inner.descriptor())
    }
}

#[pyclass(name = "SamplerConfig", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct PySamplerConfig {
    rho: f64,
    gamma_step: f64,
    inner_steps: usize,
    n_mc: usize,
    n_bi: usize,
    thin: usize,
    seed: u64,
    theta_guard: f64,
    trace_pixels: Vec<usize>,
}

#[pymethods]
impl PySamplerConfig {
    #[new]
    #[pyo3(signature = (rho, gamma_step, n_mc, n_bi, seed = 0, thin = 1, inner_steps = 1, theta_guard = 1e-10, trace_pixels = vec![]))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        rho: f64,
        gamma_step: f64,
        n_mc: usize,
        n_bi: usize,
        seed: u64,
        thin: usize,
        inner_steps: usize,
        theta_guard: f64,
        trace_pixels: Vec<usize>,
    ) -> PyResult<Self> {
        let cfg = Self { rho, gamma_step, inner_steps, n_mc, n_bi, thin, seed, theta_guard, trace_pixels };
        cfg.to_core().validate().map_err(err)?;
        Ok(cfg)
    }

    fn __repr__(&self) -> String {
        format!(
            "SamplerConfig(rho={}, gamma_step={}, n_mc={}, n_bi={}, seed={})",
            self.rho, self.gamma_step, self.n_mc, self.n_bi, self.seed
        )
    }
}

impl PySamplerConfig {
    fn to_core(&self) -> poisson_sgs::SamplerConfig {
        let mut c = poisson_sgs::SamplerConfig::new(self.rho, self.gamma_step, self.n_mc, self.n_bi, self.seed);
        c.inner_steps = self.inner_steps;
        c.thin = self.thin;
        c.theta_guard = self.theta_guard;
        c.trace_pixels = self.trace_pixels.clone();
        c
    }
}

/// Counts `y` observed through `operator` at intensity `alpha`.
#[pyclass(name = "PoissonModel", frozen)]
struct PyModel {
    inner: PoissonModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(y: Vec<u64>, alpha: f64, operator: &PyOperator) -> PyResult<Self> {
        Ok(Self { inner: PoissonModel::new(y, alpha, operator.inner.clone()).map_err(err)? })
    }

    #[getter]
    fn y(&self) -> Vec<u64> {
        self.inner.y.clone()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }
}

/// Posterior summary and diagnostics of one chain.
#[pyclass(name = "ChainResult", frozen, get_all)]
struct PyChainResult {
    mean: Vec<f64>,
    std: Vec<f64>,
    count: usize,
    thinned: Vec<Vec<f64>>,
    potential_trace: Vec<f64>,
    mean_x_trace: Vec<f64>,
    guard_hits: u64,
    guard_checks: u64,
}

#[pymethods]
impl PyChainResult {
    #[getter]
    fn guard_rate(&self) -> f64 {
        if self.guard_checks == 0 {
            0.0
        } else {
            self.guard_hits as f64 / self.guard_checks as f64
        }
    }
}

/// Runs one chain. `init` is `"constant"`, `"backprojection"` or a
/// positive starting image used for `x`, `z1` and `z2`.
#[pyfunction]
#[pyo3(signature = (model, prior, config, init = None))]
fn run_chain(
    py: Python<'_>,
    model: &PyModel,
    prior: &PyPrior,
    config: &PySamplerConfig,
    init: Option<Bound<'_, PyAny>>,
) -> PyResult<PyChainResult> {
    let start = match init {
        None => None,
        Some(v) => match v.extract::<String>() {
            Ok(s) if s == "constant" => None,
            Ok(s) if s == "backprojection" => Some(backprojection_init(&model.inner, 1e-3).map_err(err)?),
            Ok(s) => return Err(PyValueError::new_err(format!("unknown init {s:?}"))),
            Err(_) => {
                let x: Vec<f64> = v.extract()?;
                let n = x.len();
                Some(ChainState { s: vec![0; n], z1: x.clone(), z2: x.clone(), x })
            }
        },
    };
    let cfg = config.to_core();
    let (summary, diag) = py
        .detach(|| poisson_sgs::run_chain(&model.inner, prior.inner.as_ref(), &cfg, start))
        .map_err(err)?;
    let thinned = (0..summary.thinned.len()).map(|k| summary.thinned.sample(k).to_vec()).collect();
    Ok(PyChainResult {
        std: summary.std(),
        mean: summary.mean,
        count: summary.count,
        thinned,
        potential_trace: diag.potential_trace,
        mean_x_trace: diag.mean_x_trace,
        guard_hits: diag.guard_hits,
        guard_checks: diag.guard_checks,
    })
}

/// Poisson counts `y_i ~ P(α (Hx)_i)` from a seeded stream.
#[pyfunction]
fn simulate_counts(x: Vec<f64>, operator: &PyOperator, alpha: f64, seed: u64) -> PyResult<Vec<u64>> {
    let mut stream = RandomStream::new(derive_seed(seed, 1), StreamKind::Observation as u64);
    experiments::generate_observation(&x, operator.inner.as_ref(), alpha, &mut stream).map_err(err)
}

/// Ellipse head phantom as a flat row-major list.
#[pyfunction]
fn phantom(size: usize) -> PyResult<Vec<f64>> {
    Ok(experiments::shepp_logan_phantom(size).map_err(err)?.data)
}

#[pyfunction]
#[pyo3(signature = (reference, estimate, peak = 1.0))]
fn psnr(reference: Vec<f64>, estimate: Vec<f64>, peak: f64) -> PyResult<f64> {
    psnr_db(&reference, &estimate, peak).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (reference, estimate, height, width, peak = 1.0))]
fn ssim(reference: Vec<f64>, estimate: Vec<f64>, height: usize, width: usize, peak: f64) -> PyResult<f64> {
    ssim_index(&reference, &estimate, height, width, peak).map_err(err)
}

/// `(m, M, rho_max)` for iterates in `[eps_z, c_z]`.
#[pyfunction]
fn check_convergence_constants(eps_z: f64, c_z: f64, beta: f64, rho: f64, l_d: f64) -> PyResult<(f64, f64, f64)> {
    let c = constants(eps_z, c_z, beta, rho, l_d).map_err(err)?;
    Ok((c.m, c.big_m, c.rho_max))
}

/// Runs the validation battery; returns `(name, passed, detail)` triples.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn oracle(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let out = py.detach(|| run_oracle_battery(seed)).map_err(err)?;
    Ok(out.into_iter().map(|o| (o.name.to_string(), o.passed, o.detail)).collect())
}

/// Runs an experiment from a TOML file and returns the JSON summary text.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir = None, seed = None, overrides = vec![]))]
fn run_experiment(
    py: Python<'_>,
    config_path: PathBuf,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Vec<(String, String)>,
) -> PyResult<String> {
    let mut cfg = ExperimentConfig::load(&config_path).map_err(err)?;
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(err)?;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    if let Some(s) = seed {
        cfg.sampler.seed = s;
    }
    let out = py.detach(|| experiments::run_experiment(&cfg)).map_err(err)?;
    std::fs::read_to_string(cfg.out_dir.join("summary.json"))
        .map_err(|e| SamplerError::new_err(format!("summary for {:?}: {e}", out.summary.task)))
}

#[pymodule(name = "poisson_sgs")]
fn poisson_sgs_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SamplerError", m.py().get_type::<SamplerError>())?;
    m.add_class::<PyOperator>()?;
    m.add_class::<PyPrior>()?;
    m.add_class::<PySamplerConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyChainResult>()?;
    for f in [
        wrap_pyfunction!(run_chain, m)?,
        wrap_pyfunction!(simulate_counts, m)?,
        wrap_pyfunction!(phantom, m)?,
        wrap_pyfunction!(psnr, m)?,
        wrap_pyfunction!(ssim, m)?,
        wrap_pyfunction!(check_convergence_constants, m)?,
        wrap_pyfunction!(oracle, m)?,
        wrap_pyfunction!(run_experiment, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
