//! End-to-end experiment driver and artifact writer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, InitKind, PriorKind, PriorSpec, Task};
use super::image::{read_image, write_pnm, write_raw_f32, ImageBuffer};
use super::phantom::shepp_logan_phantom;
use super::{derive_seed, generate_observation};
use crate::diagnostics::{acf, calibration_from_coverage, coverage_map, CalibrationCurve, MetricsReport, MIN_COVERAGE_SAMPLES};
use crate::error::{Error, Result};
use crate::operators::{build_projector, gaussian_kernel, ConvolutionOperator, ForwardOperator, IdentityOperator, ProjectorGeometry};
use crate::priors::{
    Denoiser, ExternalDenoiser, FlatPrior, LinearSmoothingDenoiser, RedPrior, ScorePrior, SmoothedTVParams,
    SmoothedTvPrior, TikhonovPrior,
};
use crate::rngdist::{RandomStream, StreamKind};
use crate::sampler::{backprojection_init, Chain, Checkpoint, DiagnosticsBundle, PoissonModel, PosteriorSummary};

pub const SCHEMA_VERSION: u32 = 1;

const INIT_FLOOR: f64 = 1e-3;

pub fn load_truth(cfg: &ExperimentConfig) -> Result<ImageBuffer> {
    match (&cfg.image.phantom, &cfg.image.path) {
        (Some(size), _) => shepp_logan_phantom(*size),
        (None, Some(path)) => read_image(path),
        (None, None) => Err(Error::Config("no image source".into())),
    }
}

pub fn build_operator(cfg: &ExperimentConfig, height: usize, width: usize) -> Result<Arc<dyn ForwardOperator>> {
    let o = &cfg.operator;
    Ok(match cfg.task {
        Task::Denoise => Arc::new(IdentityOperator::new(height * width)),
        Task::Deblur => {
            let k = gaussian_kernel(o.kernel_size, o.kernel_sigma)?;
            Arc::new(ConvolutionOperator::new(k, (o.kernel_size, o.kernel_size), (height, width), o.boundary)?)
        }
        Task::Tomography => {
            let geometry = match &o.geometry_file {
                Some(path) => {
                    let g = ProjectorGeometry::from_toml(&fs::read_to_string(path)?)?;
                    if (g.height, g.width) != (height, width) {
                        return Err(Error::Config(format!(
                            "geometry grid {}x{} does not match image {height}x{width}",
                            g.height, g.width
                        )));
                    }
                    g
                }
                None => {
                    let mut g = ProjectorGeometry::uniform(height, width, o.angles);
                    if let Some(d) = o.detectors {
                        g.detector_count = d;
                    }
                    g.detector_spacing = o.detector_spacing;
                    g
                }
            };
            Arc::new(build_projector(geometry)?)
        }
    })
}

fn red_denoiser(spec: &PriorSpec, strength: f64, h: usize, w: usize) -> Result<Arc<dyn Denoiser>> {
    Ok(match &spec.command {
        Some(cmd) => Arc::new(ExternalDenoiser::new(
            cmd[0].clone(),
            cmd[1..].to_vec(),
            (h, w),
            strength,
            spec.lipschitz.unwrap_or(1.0),
            Duration::from_secs_f64(spec.timeout_s),
        )),
        None => Arc::new(LinearSmoothingDenoiser::gaussian(strength, h, w)?),
    })
}

pub fn build_prior(spec: &PriorSpec, height: usize, width: usize) -> Result<Arc<dyn ScorePrior>> {
    Ok(match spec.kind {
        PriorKind::Flat => Arc::new(FlatPrior { beta: spec.beta }),
        PriorKind::Tikhonov => Arc::new(TikhonovPrior { center: vec![spec.center; height * width], beta: spec.beta }),
        PriorKind::Tv => Arc::new(SmoothedTvPrior::new(
            SmoothedTVParams { epsilon: spec.epsilon, beta: spec.beta },
            height,
            width,
        )?),
        PriorKind::Red => {
            let (burn, sample) = spec.nu.unwrap_or((spec.sigma, spec.sigma));
            Arc::new(RedPrior::with_schedule(
                spec.beta,
                red_denoiser(spec, burn, height, width)?,
                red_denoiser(spec, sample, height, width)?,
            ))
        }
    })
}

/// Output of one channel's chain.
#[derive(Debug, Clone)]
pub struct ChannelResult {
    pub channel: usize,
    pub y: Vec<u64>,
    pub summary: PosteriorSummary,
    pub diagnostics: DiagnosticsBundle,
    pub checkpoint: Checkpoint,
}

/// Simulates and samples one channel. The observation and chain seeds
/// depend only on the master seed and the channel index.
pub fn run_channel(
    cfg: &ExperimentConfig,
    op: Arc<dyn ForwardOperator>,
    prior: &dyn ScorePrior,
    truth: &[f64],
    channel: usize,
) -> Result<ChannelResult> {
    let master = cfg.sampler.seed;
    let c = channel as u64;
    let mut obs = RandomStream::new(derive_seed(master, 2 * c + 1), StreamKind::Observation as u64);
    let y = generate_observation(truth, op.as_ref(), cfg.alpha, &mut obs)?;
    let model = PoissonModel::new(y.clone(), cfg.alpha, op)?;
    let mut sampler = cfg.sampler.clone();
    sampler.seed = derive_seed(master, 2 * c + 2);
    let init = match cfg.init {
        InitKind::Constant => None,
        InitKind::Backprojection => Some(backprojection_init(&model, INIT_FLOOR)?),
    };
    let mut chain = Chain::new(&model, prior, sampler, init)?;
    let (summary, diagnostics) = chain.run()?;
    log::info!(
        "channel {channel}: {} sweeps, guard rate {:.2e}",
        chain.sweep_index(),
        diagnostics.guard_rate()
    );
    Ok(ChannelResult { channel, y, summary, diagnostics, checkpoint: chain.checkpoint() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub task: Task,
    pub alpha: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub prior: String,
    pub metrics: MetricsReport,
    /// PSNR of `y / α` against the truth, for tasks observed in image space.
    pub observation_psnr_db: Option<f64>,
    pub posterior_samples: usize,
    pub thinned_samples: usize,
    pub guard_hits: u64,
    pub guard_checks: u64,
    pub guard_rate: f64,
    /// Value mapped to white in the standard-deviation image.
    pub std_display_max: f64,
    pub coverage_available: bool,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub truth: ImageBuffer,
    pub mean: ImageBuffer,
    pub std: ImageBuffer,
    pub coverage: Option<ImageBuffer>,
    pub calibration: Vec<CalibrationCurve>,
    pub channels: Vec<ChannelResult>,
}

/// Runs every channel, computes metrics and writes all artifacts to
/// `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let out = simulate(cfg)?;
    write_artifacts(cfg, &out)?;
    Ok(out)
}

/// Everything [`run_experiment`] does except writing files.
pub fn simulate(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let truth = load_truth(cfg)?;
    let (h, w, nc) = (truth.height, truth.width, truth.channels);
    let op = build_operator(cfg, h, w)?;
    let prior = build_prior(&cfg.prior, h, w)?;
    log::info!("{:?} {h}x{w}x{nc}, prior {}", cfg.task, prior.descriptor());

    let channels: Vec<ChannelResult> = (0..nc)
        .into_par_iter()
        .map(|c| run_channel(cfg, op.clone(), prior.as_ref(), truth.channel(c), c))
        .collect::<Result<_>>()?;

    let mean = ImageBuffer::from_channels(h, w, &channels.iter().map(|r| r.summary.mean.clone()).collect::<Vec<_>>())?;
    let std = ImageBuffer::from_channels(h, w, &channels.iter().map(|r| r.summary.std()).collect::<Vec<_>>())?;
    let thinned = channels[0].summary.thinned.len();
    let (coverage, calibration) = if thinned >= MIN_COVERAGE_SAMPLES {
        let mut planes = Vec::new();
        let mut curves = Vec::new();
        for r in &channels {
            let map = coverage_map(&r.summary.thinned, truth.channel(r.channel))?;
            curves.push(calibration_from_coverage(&map, &cfg.output.calibration_targets)?);
            planes.push(map.levels);
        }
        (Some(ImageBuffer::from_channels(h, w, &planes)?), curves)
    } else {
        log::warn!("{thinned} thinned samples; coverage needs {MIN_COVERAGE_SAMPLES}");
        (None, Vec::new())
    };

    let peak = 1.0;
    let metrics = MetricsReport::compute(&truth.data, &mean.data, h, w, nc, peak)?;
    let observation_psnr_db = match cfg.task {
        Task::Tomography => None,
        _ => {
            let scaled: Vec<f64> = channels.iter().flat_map(|r| r.y.iter().map(|&v| v as f64 / cfg.alpha)).collect();
            Some(crate::diagnostics::psnr(&truth.data, &scaled, peak)?)
        }
    };
    let guard_hits = channels.iter().map(|r| r.diagnostics.guard_hits).sum();
    let guard_checks = channels.iter().map(|r| r.diagnostics.guard_checks).sum();
    let std_display_max = std.data.iter().cloned().fold(0.0, f64::max);

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        task: cfg.task,
        alpha: cfg.alpha,
        seed: cfg.sampler.seed,
        height: h,
        width: w,
        channels: nc,
        prior: prior.descriptor(),
        metrics,
        observation_psnr_db,
        posterior_samples: channels[0].summary.count,
        thinned_samples: thinned,
        guard_hits,
        guard_checks,
        guard_rate: if guard_checks == 0 { 0.0 } else { guard_hits as f64 / guard_checks as f64 },
        std_display_max,
        coverage_available: coverage.is_some(),
        artifacts: Vec::new(),
    };
    Ok(RunOutput { summary, truth, mean, std, coverage, calibration, channels })
}

fn pnm_name(stem: &str, channels: usize) -> String {
    format!("{stem}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

fn raw_names(stem: &str, channels: usize) -> Vec<String> {
    if channels == 1 {
        vec![format!("{stem}.raw")]
    } else {
        (0..channels).map(|c| format!("{stem}_ch{c}.raw")).collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_text(dir: &Path, name: &str, text: &str, names: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), text)?;
    names.push(name.to_string());
    Ok(())
}

fn write_image_set(
    dir: &Path,
    stem: &str,
    img: &ImageBuffer,
    bits: u32,
    hi: f64,
    names: &mut Vec<String>,
) -> Result<()> {
    let pnm = pnm_name(stem, img.channels);
    write_pnm(dir.join(&pnm), img, bits, 0.0, if hi > 0.0 { hi } else { 1.0 })?;
    names.push(pnm);
    for (c, raw) in raw_names(stem, img.channels).into_iter().enumerate() {
        write_raw_f32(dir.join(&raw), img.height, img.width, img.channel(c))?;
        names.push(raw);
    }
    Ok(())
}

/// Writes images, CSV tables, the JSON summary and the resolved config.
pub fn write_artifacts(cfg: &ExperimentConfig, out: &RunOutput) -> Result<Vec<String>> {
    let dir = cfg.out_dir.as_path();
    fs::create_dir_all(dir)?;
    let bits = cfg.output.image_bits;
    let mut names = Vec::new();
    let (h, w, nc) = (out.truth.height, out.truth.width, out.truth.channels);

    write_image_set(dir, "truth", &out.truth, bits, 1.0, &mut names)?;
    write_image_set(dir, "posterior_mean", &out.mean, bits, 1.0, &mut names)?;
    write_image_set(dir, "posterior_std", &out.std, bits, out.summary.std_display_max, &mut names)?;
    if let Some(cov) = &out.coverage {
        write_image_set(dir, "coverage", cov, bits, 1.0, &mut names)?;
    }
    if cfg.task != Task::Tomography {
        let planes: Vec<Vec<f64>> = out.channels.iter().map(|r| r.y.iter().map(|&v| v as f64 / cfg.alpha).collect()).collect();
        let obs = ImageBuffer::from_channels(h, w, &planes)?;
        let name = pnm_name("observation", nc);
        write_pnm(dir.join(&name), &obs, bits, 0.0, 1.0)?;
        names.push(name);
    }

    let mut csv = String::from("channel,target,achieved\n");
    for (c, curve) in out.calibration.iter().enumerate() {
        for (t, a) in curve.targets.iter().zip(&curve.achieved) {
            writeln!(csv, "{c},{t},{a}").unwrap();
        }
    }
    write_text(dir, "calibration.csv", &csv, &mut names)?;

    let n_bi = cfg.sampler.n_bi;
    let pixels: Vec<usize> = out.channels[0].diagnostics.pixel_traces.iter().map(|(p, _)| *p).collect();
    let mut csv = String::from("channel,lag,potential");
    for p in &pixels {
        write!(csv, ",pixel_{p}").unwrap();
    }
    csv.push('\n');
    for r in &out.channels {
        let d = &r.diagnostics;
        let post = |t: &[f64]| t[n_bi.min(t.len())..].to_vec();
        let lag = cfg.output.acf_max_lag.min(d.potential_trace.len().saturating_sub(n_bi + 2));
        let mut cols = vec![acf(&post(&d.potential_trace), lag).ok()];
        for (_, t) in &d.pixel_traces {
            cols.push(acf(&post(t), lag).ok());
        }
        for k in 0..=lag {
            write!(csv, "{},{k}", r.channel).unwrap();
            for col in &cols {
                write!(csv, ",{}", fmt_opt(col.as_ref().map(|v| v[k]))).unwrap();
            }
            csv.push('\n');
        }
    }
    write_text(dir, "acf.csv", &csv, &mut names)?;

    let mut csv = String::from("channel,sweep,potential,mean_x\n");
    for r in &out.channels {
        let d = &r.diagnostics;
        for (t, (u, m)) in d.potential_trace.iter().zip(&d.mean_x_trace).enumerate() {
            writeln!(csv, "{},{t},{u},{m}", r.channel).unwrap();
        }
    }
    write_text(dir, "trace.csv", &csv, &mut names)?;

    let s = &out.summary;
    let csv = format!(
        "task,alpha,seed,channels,{},observation_psnr_db,guard_rate\n{},{},{},{},{},{},{}\n",
        MetricsReport::csv_header(),
        s.task.name(),
        s.alpha,
        s.seed,
        s.channels,
        s.metrics.csv_row(),
        fmt_opt(s.observation_psnr_db),
        s.guard_rate
    );
    write_text(dir, "metrics.csv", &csv, &mut names)?;

    if cfg.output.checkpoint {
        for r in &out.channels {
            let name = format!("chain_ch{}.ckpt", r.channel);
            r.checkpoint.save(dir.join(&name))?;
            names.push(name);
        }
    }

    write_text(dir, "config.resolved.toml", &cfg.to_toml_string()?, &mut names)?;
    names.push("summary.json".into());
    let mut summary = out.summary.clone();
    summary.artifacts = names.clone();
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(names)
}
