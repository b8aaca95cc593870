//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::default_targets;
use crate::error::{Error, Result};
use crate::operators::Boundary;
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    Deblur,
    Tomography,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Deblur => "deblur",
            Task::Tomography => "tomography",
        }
    }
}

/// Starting state of every chain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Constant image matching the mean count level.
    #[default]
    Constant,
    /// Normalized back-projection of the counts; `y/α` for denoising.
    Backprojection,
}

/// Ground truth: a generated phantom or an image file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_kernel_size() -> usize {
    9
}
fn default_kernel_sigma() -> f64 {
    1.6
}
fn default_angles() -> usize {
    60
}
fn default_spacing() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_kernel_sigma")]
    pub kernel_sigma: f64,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default = "default_angles")]
    pub angles: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectors: Option<usize>,
    #[serde(default = "default_spacing")]
    pub detector_spacing: f64,
    /// Projector geometry TOML; overrides `angles` and `detectors`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_file: Option<PathBuf>,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        Self {
            kernel_size: default_kernel_size(),
            kernel_sigma: default_kernel_sigma(),
            boundary: Boundary::default(),
            angles: default_angles(),
            detectors: None,
            detector_spacing: default_spacing(),
            geometry_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Flat,
    Tikhonov,
    Tv,
    Red,
}

fn default_beta() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-2
}
fn default_sigma() -> f64 {
    1.0
}
fn default_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub kind: PriorKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Smoothing of the TV prior.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Constant centre of the Tikhonov prior.
    #[serde(default)]
    pub center: f64,
    /// Gaussian denoiser width for RED.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// RED denoiser strengths `(burn-in, sampling)`; overrides `sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<(f64, f64)>,
    /// External denoiser program and leading arguments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_max_lag() -> usize {
    100
}
fn default_bits() -> u32 {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_max_lag")]
    pub acf_max_lag: usize,
    #[serde(default = "default_targets")]
    pub calibration_targets: Vec<f64>,
    #[serde(default = "default_bits")]
    pub image_bits: u32,
    /// Write the final chain state of every channel.
    #[serde(default)]
    pub checkpoint: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            acf_max_lag: default_max_lag(),
            calibration_targets: default_targets(),
            image_bits: default_bits(),
            checkpoint: false,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub alpha: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub image: ImageSpec,
    #[serde(default)]
    pub operator: OperatorSpec,
    pub prior: PriorSpec,
    #[serde(default)]
    pub init: InitKind,
    /// `sampler.seed` is the master seed of the whole experiment.
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative input paths are taken relative to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.image.path);
        resolve(base, &mut cfg.operator.geometry_file);
        Ok(cfg)
    }

    /// Sets a dotted key such as `sampler.n_mc` from its TOML text; bare
    /// words are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for (k, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a table")))?;
            if k + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be > 0", self.alpha));
        }
        self.sampler.validate()?;
        match (&self.image.phantom, &self.image.path) {
            (Some(s), None) if *s < super::phantom::MIN_PHANTOM_SIZE => {
                return bad(format!("phantom size {s} too small"))
            }
            (Some(_), None) => {}
            (None, Some(p)) if !p.exists() => return bad(format!("image {} does not exist", p.display())),
            (None, Some(_)) => {}
            _ => return bad("image needs exactly one of `phantom` or `path`".into()),
        }
        let op = &self.operator;
        if self.task == Task::Deblur && (op.kernel_size.is_multiple_of(2) || !(op.kernel_sigma > 0.0)) {
            return bad("deblur kernel needs odd size and positive sigma".into());
        }
        if self.task == Task::Tomography {
            if let Some(g) = &op.geometry_file {
                if !g.exists() {
                    return bad(format!("geometry file {} does not exist", g.display()));
                }
            } else if op.angles == 0 || op.detectors == Some(0) || !(op.detector_spacing > 0.0) {
                return bad("tomography needs angles, detectors and spacing > 0".into());
            }
        }
        let p = &self.prior;
        if !(p.beta > 0.0) {
            return bad(format!("prior beta {} must be > 0", p.beta));
        }
        if p.kind == PriorKind::Tv && !(p.epsilon > 0.0) {
            return bad("tv epsilon must be > 0".into());
        }
        if p.kind == PriorKind::Red {
            if let Some((a, b)) = p.nu {
                if !(a > 0.0 && b > 0.0) {
                    return bad("nu strengths must be > 0".into());
                }
            }
            if p.command.as_ref().is_some_and(|c| c.is_empty()) {
                return bad("empty denoiser command".into());
            }
        }
        if self.output.calibration_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("calibration targets must lie in [0, 1]".into());
        }
        if ![8, 16].contains(&self.output.image_bits) {
            return bad("image_bits must be 8 or 16".into());
        }
        Ok(())
    }
}
