//! Image-quality metrics and posterior uncertainty products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples stored row by row: sample `k` occupies `data[k*n..(k+1)*n]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, data: Vec::new() }
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || !data.len().is_multiple_of(n) {
            return Err(Error::LengthMismatch { expected: n, got: data.len() });
        }
        Ok(Self { n, data })
    }

    pub fn push(&mut self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.n {
            return Err(Error::LengthMismatch { expected: self.n, got: sample.len() });
        }
        self.data.extend_from_slice(sample);
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.data.len() / self.n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.data[k * self.n..(k + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    Ok(())
}

/// `10 log10(peak² / MSE)`; `+∞` when the images are identical.
pub fn psnr(reference: &[f64], estimate: &[f64], peak: f64) -> Result<f64> {
    same_len(reference, estimate)?;
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak {peak} must be > 0")));
    }
    if reference.is_empty() {
        return Err(Error::Domain("empty image".into()));
    }
    let mse = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 8;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Mean SSIM over all 8×8 windows (stride 1, uniform weights).
pub fn ssim(reference: &[f64], estimate: &[f64], height: usize, width: usize, peak: f64) -> Result<f64> {
    same_len(reference, estimate)?;
    if reference.len() != height * width {
        return Err(Error::LengthMismatch { expected: height * width, got: reference.len() });
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Domain(format!("image {height}x{width} smaller than the SSIM window")));
    }
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak {peak} must be > 0")));
    }
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let w = SSIM_WINDOW;
    let np = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=height - w {
        for c0 in 0..=width - w {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    let a = reference[r * width + c];
                    let b = estimate[r * width + c];
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let va = (saa / np - ma * ma).max(0.0);
            let vb = (sbb / np - mb * mb).max(0.0);
            let cov = sab / np - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Biased sample autocorrelation, `acf[0] = 1`.
pub fn acf(trace: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if trace.len() <= max_lag + 1 {
        return Err(Error::InsufficientSamples { needed: max_lag + 2, got: trace.len() });
    }
    let n = trace.len() as f64;
    let mean = trace.iter().sum::<f64>() / n;
    let dev: Vec<f64> = trace.iter().map(|v| v - mean).collect();
    let c0: f64 = dev.iter().map(|d| d * d).sum();
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(Error::Degenerate("constant trace has no autocorrelation".into()));
    }
    Ok((0..=max_lag)
        .map(|k| dev[..dev.len() - k].iter().zip(&dev[k..]).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect())
}

pub const MIN_COVERAGE_SAMPLES: usize = 50;

/// Per-pixel minimal central credible level containing the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMap {
    pub levels: Vec<f64>,
}

/// Level `|2F − 1|` with `F` the mid-rank empirical CDF of the truth among
/// the samples. Central intervals stand in for HPD intervals.
pub fn coverage_map(thinned: &SampleMatrix, truth: &[f64]) -> Result<CoverageMap> {
    if thinned.len() < MIN_COVERAGE_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_COVERAGE_SAMPLES,
            got: thinned.len(),
        });
    }
    if truth.len() != thinned.dim() {
        return Err(Error::LengthMismatch { expected: thinned.dim(), got: truth.len() });
    }
    let ns = thinned.len();
    let mut less = vec![0u32; truth.len()];
    let mut equal = vec![0u32; truth.len()];
    for k in 0..ns {
        for (j, &v) in thinned.sample(k).iter().enumerate() {
            if v < truth[j] {
                less[j] += 1;
            } else if v == truth[j] {
                equal[j] += 1;
            }
        }
    }
    let levels = less
        .iter()
        .zip(&equal)
        .map(|(&l, &e)| {
            let f = (l as f64 + 0.5 * e as f64) / ns as f64;
            (2.0 * f - 1.0).abs()
        })
        .collect();
    Ok(CoverageMap { levels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub targets: Vec<f64>,
    pub achieved: Vec<f64>,
}

/// Fraction of pixels whose coverage level is at most each target.
pub fn calibration_from_coverage(map: &CoverageMap, targets: &[f64]) -> Result<CalibrationCurve> {
    if let Some(&t) = targets.iter().find(|&&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::Domain(format!("target level {t} outside [0, 1]")));
    }
    let mut sorted = map.levels.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let achieved = targets
        .iter()
        .map(|&c| {
            if c >= 1.0 {
                1.0
            } else {
                sorted.partition_point(|&l| l <= c) as f64 / n
            }
        })
        .collect();
    Ok(CalibrationCurve { targets: targets.to_vec(), achieved })
}

pub fn calibration_curve(thinned: &SampleMatrix, truth: &[f64], targets: &[f64]) -> Result<CalibrationCurve> {
    calibration_from_coverage(&coverage_map(thinned, truth)?, targets)
}

/// `0, 0.05, …, 1`.
pub fn default_targets() -> Vec<f64> {
    (0..=20).map(|k| k as f64 / 20.0).collect()
}

/// Unbiased per-pixel standard deviation of stored samples.
pub fn pixelwise_std(thinned: &SampleMatrix) -> Result<Vec<f64>> {
    let ns = thinned.len();
    if ns < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: ns });
    }
    let n = thinned.dim();
    let mut mean = vec![0.0; n];
    for k in 0..ns {
        for (m, v) in mean.iter_mut().zip(thinned.sample(k)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= ns as f64);
    let mut ss = vec![0.0; n];
    for k in 0..ns {
        for ((s, m), v) in ss.iter_mut().zip(&mean).zip(thinned.sample(k)) {
            *s += (v - m) * (v - m);
        }
    }
    Ok(ss.into_iter().map(|s| (s / (ns - 1) as f64).sqrt()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Figures of merit for one run. LPIPS is never computed and stays `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub peak: f64,
    pub lpips: Option<f64>,
    pub per_channel: Vec<ChannelMetrics>,
}

impl MetricsReport {
    /// Metrics of planar channels; the summary is the mean over channels
    /// (PSNR from the pooled MSE).
    pub fn compute(
        reference: &[f64],
        estimate: &[f64],
        height: usize,
        width: usize,
        channels: usize,
        peak: f64,
    ) -> Result<Self> {
        same_len(reference, estimate)?;
        let plane = height * width;
        if reference.len() != plane * channels {
            return Err(Error::LengthMismatch { expected: plane * channels, got: reference.len() });
        }
        let mut per_channel = Vec::with_capacity(channels);
        for c in 0..channels {
            let r = &reference[c * plane..(c + 1) * plane];
            let e = &estimate[c * plane..(c + 1) * plane];
            per_channel.push(ChannelMetrics {
                psnr_db: psnr(r, e, peak)?,
                ssim: ssim(r, e, height, width, peak)?,
            });
        }
        Ok(Self {
            psnr_db: psnr(reference, estimate, peak)?,
            ssim: per_channel.iter().map(|m| m.ssim).sum::<f64>() / channels as f64,
            peak,
            lpips: None,
            per_channel,
        })
    }

    pub fn csv_header() -> &'static str {
        "psnr_db,ssim,peak,lpips"
    }

    pub fn csv_row(&self) -> String {
        let lp = self.lpips.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.psnr_db, self.ssim, self.peak, lp)
    }
}
