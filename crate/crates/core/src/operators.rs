//! Nonnegative forward operators `H` with the three access patterns the
//! sampler needs: `Hx`, sparse row access, and cached column sums.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights below this are treated as structural zeros.
pub const WEIGHT_FLOOR: f64 = 1e-14;

/// Sparse row of `H`: strictly increasing column ids with positive weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OperatorRow {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl OperatorRow {
    pub fn new(indices: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let row = Self { indices, weights };
        row.validate()?;
        Ok(row)
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                expected: self.indices.len(),
                got: self.weights.len(),
            });
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Model("row indices are not strictly increasing".into()));
        }
        if let Some(k) = self.weights.iter().position(|&w| !(w > 0.0)) {
            return Err(Error::Model(format!("row weight {k} is not positive")));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.indices.iter().zip(&self.weights).map(|(&j, &w)| w * x[j]).sum()
    }

    pub fn clear(&mut self) {
        self.indices.clear();
        self.weights.clear();
    }

    /// Sorts `(index, weight)` pairs, merges duplicates and drops
    /// sub-floor weights.
    fn from_pairs(pairs: &mut Vec<(usize, f64)>, out: &mut OperatorRow) {
        out.clear();
        pairs.sort_unstable_by_key(|p| p.0);
        for &(j, w) in pairs.iter() {
            match out.indices.last() {
                Some(&last) if last == j => *out.weights.last_mut().unwrap() += w,
                _ => {
                    out.indices.push(j);
                    out.weights.push(w);
                }
            }
        }
        if out.weights.iter().any(|&w| w < WEIGHT_FLOOR) {
            let (idx, wts): (Vec<usize>, Vec<f64>) = out
                .indices
                .iter()
                .zip(&out.weights)
                .filter(|(_, &w)| w >= WEIGHT_FLOOR)
                .map(|(&j, &w)| (j, w))
                .unzip();
            out.indices = idx;
            out.weights = wts;
        }
    }
}

/// A nonnegative `m x n` matrix seen through the access patterns of the
/// Gibbs sweep.
pub trait ForwardOperator: Send + Sync + fmt::Debug {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;

    /// `(Hx)_i = sum_j h_ij x_j` with no intensity factor.
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Writes row `i` into `out`, reusing its buffers.
    fn row_into(&self, i: usize, out: &mut OperatorRow) -> Result<()>;

    fn row(&self, i: usize) -> Result<OperatorRow> {
        let mut out = OperatorRow::default();
        self.row_into(i, &mut out)?;
        Ok(out)
    }

    /// `sum_i h_ij` for every column; computed once.
    fn col_sums(&self) -> &[f64];

    /// Checks the operator invariants: nonnegative entries and no empty row.
    fn validate(&self) -> Result<()> {
        let mut buf = OperatorRow::default();
        for i in 0..self.nrows() {
            self.row_into(i, &mut buf)?;
            if buf.is_empty() {
                return Err(Error::Model(format!("row {i} has no positive entry")));
            }
        }
        Ok(())
    }
}

fn check_len(x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: x.len(),
        });
    }
    Ok(())
}

fn check_row(i: usize, m: usize) -> Result<()> {
    if i >= m {
        return Err(Error::IndexOutOfRange { index: i, len: m });
    }
    Ok(())
}

fn fold_col_sums(op: &dyn ForwardOperator) -> Vec<f64> {
    let mut sums = vec![0.0; op.ncols()];
    let mut buf = OperatorRow::default();
    for i in 0..op.nrows() {
        op.row_into(i, &mut buf).expect("row index in range");
        for (&j, &w) in buf.indices.iter().zip(&buf.weights) {
            sums[j] += w;
        }
    }
    sums
}

/// The identity, used for denoising.
#[derive(Debug)]
pub struct IdentityOperator {
    n: usize,
    ones: OnceLock<Vec<f64>>,
}

impl IdentityOperator {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            ones: OnceLock::new(),
        }
    }
}

impl ForwardOperator for IdentityOperator {
    fn nrows(&self) -> usize {
        self.n
    }

    fn ncols(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(x, self.n)?;
        Ok(x.to_vec())
    }

    fn row_into(&self, i: usize, out: &mut OperatorRow) -> Result<()> {
        check_row(i, self.n)?;
        out.clear();
        out.indices.push(i);
        out.weights.push(1.0);
        Ok(())
    }

    fn col_sums(&self) -> &[f64] {
        self.ones.get_or_init(|| vec![1.0; self.n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Periodic,
    ZeroPad,
}

/// 2-D convolution with a nonnegative stencil. Rows are generated from the
/// stencil on demand.
#[derive(Debug)]
pub struct ConvolutionOperator {
    height: usize,
    width: usize,
    boundary: Boundary,
    kernel_shape: (usize, usize),
    kernel: Vec<f64>,
    // (row offset, col offset, weight) for the nonzero taps.
    taps: Vec<(isize, isize, f64)>,
    sums: OnceLock<Vec<f64>>,
}

impl ConvolutionOperator {
    /// `kernel` is row-major with shape `kernel_shape`; its centre tap is at
    /// `(kh / 2, kw / 2)`.
    pub fn new(
        kernel: Vec<f64>,
        kernel_shape: (usize, usize),
        image_shape: (usize, usize),
        boundary: Boundary,
    ) -> Result<Self> {
        let (kh, kw) = kernel_shape;
        let (height, width) = image_shape;
        if kh == 0 || kw == 0 || height == 0 || width == 0 {
            return Err(Error::Domain("convolution shapes must be positive".into()));
        }
        check_len(&kernel, kh * kw)?;
        if kernel.iter().any(|&k| !(k >= 0.0) || !k.is_finite()) {
            return Err(Error::Domain("kernel entries must be finite and >= 0".into()));
        }
        if kernel.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Domain("kernel must have positive mass".into()));
        }
        let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
        let taps = kernel
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(t, &w)| ((t / kw) as isize - ch, (t % kw) as isize - cw, w))
            .collect();
        Ok(Self {
            height,
            width,
            boundary,
            kernel_shape,
            kernel,
            taps,
            sums: OnceLock::new(),
        })
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn kernel(&self) -> (&[f64], (usize, usize)) {
        (&self.kernel, self.kernel_shape)
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    #[inline]
    fn source(&self, r: usize, c: usize, dr: isize, dc: isize) -> Option<usize> {
        let (h, w) = (self.height as isize, self.width as isize);
        let (mut sr, mut sc) = (r as isize - dr, c as isize - dc);
        match self.boundary {
            Boundary::Periodic => {
                sr = sr.rem_euclid(h);
                sc = sc.rem_euclid(w);
            }
            Boundary::ZeroPad => {
                if sr < 0 || sr >= h || sc < 0 || sc >= w {
                    return None;
                }
            }
        }
        Some(sr as usize * self.width + sc as usize)
    }
}

impl ForwardOperator for ConvolutionOperator {
    fn nrows(&self) -> usize {
        self.height * self.width
    }

    fn ncols(&self) -> usize {
        self.height * self.width
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(x, self.ncols())?;
        let mut out = vec![0.0; self.nrows()];
        for r in 0..self.height {
            for c in 0..self.width {
                let mut acc = 0.0;
                for &(dr, dc, w) in &self.taps {
                    if let Some(j) = self.source(r, c, dr, dc) {
                        acc += w * x[j];
                    }
                }
                out[r * self.width + c] = acc;
            }
        }
        Ok(out)
    }

    fn row_into(&self, i: usize, out: &mut OperatorRow) -> Result<()> {
        check_row(i, self.nrows())?;
        let (r, c) = (i / self.width, i % self.width);
        let mut pairs: Vec<(usize, f64)> = self
            .taps
            .iter()
            .filter_map(|&(dr, dc, w)| self.source(r, c, dr, dc).map(|j| (j, w)))
            .collect();
        OperatorRow::from_pairs(&mut pairs, out);
        Ok(())
    }

    fn col_sums(&self) -> &[f64] {
        self.sums.get_or_init(|| fold_col_sums(self))
    }
}

/// Normalized isotropic Gaussian stencil of odd side `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::Domain(format!("kernel size {size} must be odd and positive")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("kernel sigma {sigma} must be positive")));
    }
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|t| {
            let (a, b) = ((t / size) as f64 - c, (t % size) as f64 - c);
            (-(a * a + b * b) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Materialized sparse operator in compressed-row layout.
#[derive(Debug)]
pub struct SparseOperator {
    ncols: usize,
    row_ptr: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
    sums: OnceLock<Vec<f64>>,
}

impl SparseOperator {
    pub fn from_rows(rows: Vec<OperatorRow>, ncols: usize) -> Result<Self> {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for (i, row) in rows.into_iter().enumerate() {
            row.validate()?;
            if let Some(&j) = row.indices.last() {
                if j >= ncols {
                    return Err(Error::Model(format!("row {i} references column {j} >= {ncols}")));
                }
            }
            indices.extend(row.indices);
            weights.extend(row.weights);
            row_ptr.push(indices.len());
        }
        Ok(Self {
            ncols,
            row_ptr,
            indices,
            weights,
            sums: OnceLock::new(),
        })
    }

    /// Builds from a row-major dense matrix, keeping entries above the floor.
    pub fn from_dense(m: usize, n: usize, data: &[f64]) -> Result<Self> {
        check_len(data, m * n)?;
        if let Some(k) = data.iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::Model(format!("matrix entry {k} is negative or NaN")));
        }
        let rows = (0..m)
            .map(|i| {
                let (idx, w): (Vec<usize>, Vec<f64>) = (0..n)
                    .filter(|&j| data[i * n + j] >= WEIGHT_FLOOR)
                    .map(|j| (j, data[i * n + j]))
                    .unzip();
                OperatorRow { indices: idx, weights: w }
            })
            .collect();
        Self::from_rows(rows, n)
    }

    fn slice(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.indices[a..b], &self.weights[a..b])
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

impl ForwardOperator for SparseOperator {
    fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn ncols(&self) -> usize {
        self.ncols
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(x, self.ncols)?;
        Ok((0..self.nrows())
            .map(|i| {
                let (idx, w) = self.slice(i);
                idx.iter().zip(w).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect())
    }

    fn row_into(&self, i: usize, out: &mut OperatorRow) -> Result<()> {
        check_row(i, self.nrows())?;
        let (idx, w) = self.slice(i);
        out.clear();
        out.indices.extend_from_slice(idx);
        out.weights.extend_from_slice(w);
        Ok(())
    }

    fn col_sums(&self) -> &[f64] {
        self.sums.get_or_init(|| {
            let mut s = vec![0.0; self.ncols];
            for (&j, &w) in self.indices.iter().zip(&self.weights) {
                s[j] += w;
            }
            s
        })
    }
}

/// Parallel-beam acquisition geometry on a unit-pixel grid centred at the
/// origin. At angle 0 rays travel along +x and detectors are stacked along +y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorGeometry {
    pub height: usize,
    pub width: usize,
    /// Radians.
    pub angles: Vec<f64>,
    pub detector_count: usize,
    #[serde(default = "unit_spacing")]
    pub detector_spacing: f64,
}

fn unit_spacing() -> f64 {
    1.0
}

impl ProjectorGeometry {
    /// `angle_count` angles evenly spread over `[0, pi)` and a detector row
    /// spanning the grid diagonal (`ceil(width * sqrt 2)` on square grids).
    pub fn uniform(height: usize, width: usize, angle_count: usize) -> Self {
        let angles = (0..angle_count)
            .map(|k| std::f64::consts::PI * k as f64 / angle_count as f64)
            .collect();
        let diag = ((height * height + width * width) as f64).sqrt();
        Self {
            height,
            width,
            angles,
            detector_count: (diag - 1e-9).ceil() as usize,
            detector_spacing: 1.0,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    fn detector_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.detector_count as f64 - 1.0) / 2.0) * self.detector_spacing
    }
}

/// Materialized ray-driven projector; each kept row is one `(angle, detector)` ray.
#[derive(Debug)]
pub struct ProjectorOperator {
    geometry: ProjectorGeometry,
    rays: Vec<(usize, usize)>,
    matrix: SparseOperator,
}

impl ProjectorOperator {
    pub fn geometry(&self) -> &ProjectorGeometry {
        &self.geometry
    }

    /// `(angle index, detector index)` of each kept row.
    pub fn rays(&self) -> &[(usize, usize)] {
        &self.rays
    }

    pub fn dropped_rays(&self) -> usize {
        self.geometry.angles.len() * self.geometry.detector_count - self.rays.len()
    }
}

/// Exact ray/pixel intersection lengths for one line, by sorting the
/// parametric crossings with the grid lines.
fn trace_ray(geom: &ProjectorGeometry, angle: f64, offset: f64, out: &mut OperatorRow) {
    let (h, w) = (geom.height as f64, geom.width as f64);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (px, py) = (-angle.sin() * offset, angle.cos() * offset);
    let (xmin, xmax, ymin, ymax) = (-w / 2.0, w / 2.0, -h / 2.0, h / 2.0);

    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (p, d, lo, hi) in [(px, dx, xmin, xmax), (py, dy, ymin, ymax)] {
        if d.abs() < 1e-15 {
            // Half-open slab so rays on a shared edge count once.
            if p < lo || p >= hi {
                out.clear();
                return;
            }
        } else {
            let (a, b) = ((lo - p) / d, (hi - p) / d);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    if !(t1 > t0) {
        out.clear();
        return;
    }

    let mut ts = vec![t0, t1];
    if dx.abs() >= 1e-15 {
        ts.extend((0..=geom.width).map(|c| (xmin + c as f64 - px) / dx));
    }
    if dy.abs() >= 1e-15 {
        ts.extend((0..=geom.height).map(|r| (ymin + r as f64 - py) / dy));
    }
    ts.retain(|&t| t >= t0 && t <= t1);
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut pairs = Vec::with_capacity(ts.len());
    for seg in ts.windows(2) {
        let len = seg[1] - seg[0];
        if len <= WEIGHT_FLOOR {
            continue;
        }
        let tm = 0.5 * (seg[0] + seg[1]);
        let (mx, my) = (px + tm * dx, py + tm * dy);
        let col = ((mx - xmin).floor() as isize).clamp(0, geom.width as isize - 1) as usize;
        let from_bottom = ((my - ymin).floor() as isize).clamp(0, geom.height as isize - 1) as usize;
        let row = geom.height - 1 - from_bottom;
        pairs.push((row * geom.width + col, len));
    }
    OperatorRow::from_pairs(&mut pairs, out);
}

/// Builds the projector, dropping rays that miss the grid.
pub fn build_projector(geometry: ProjectorGeometry) -> Result<ProjectorOperator> {
    if geometry.height == 0 || geometry.width == 0 {
        return Err(Error::Domain("projector grid must be non-empty".into()));
    }
    if geometry.angles.is_empty() || geometry.detector_count == 0 {
        return Err(Error::Domain("projector needs angles and detectors".into()));
    }
    if !(geometry.detector_spacing > 0.0) {
        return Err(Error::Domain("detector spacing must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut rays = Vec::new();
    let mut buf = OperatorRow::default();
    for (a, &angle) in geometry.angles.iter().enumerate() {
        for k in 0..geometry.detector_count {
            trace_ray(&geometry, angle, geometry.detector_offset(k), &mut buf);
            if buf.is_empty() {
                continue;
            }
            rows.push(buf.clone());
            rays.push((a, k));
        }
    }
    let dropped = geometry.angles.len() * geometry.detector_count - rays.len();
    if dropped > 0 {
        log::warn!("projector: dropped {dropped} rays that miss the grid");
    }
    let matrix = SparseOperator::from_rows(rows, geometry.height * geometry.width)?;
    Ok(ProjectorOperator {
        geometry,
        rays,
        matrix,
    })
}

impl ForwardOperator for ProjectorOperator {
    fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.matrix.apply(x)
    }

    fn row_into(&self, i: usize, out: &mut OperatorRow) -> Result<()> {
        self.matrix.row_into(i, out)
    }

    fn col_sums(&self) -> &[f64] {
        self.matrix.col_sums()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngdist::RandomStream;

    fn apply_transpose(op: &dyn ForwardOperator, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; op.ncols()];
        for i in 0..op.nrows() {
            let row = op.row(i).unwrap();
            for (&j, &w) in row.indices.iter().zip(&row.weights) {
                out[j] += w * u[i];
            }
        }
        out
    }

    fn check_row_consistency(op: &dyn ForwardOperator, seed: u64) {
        let mut s = RandomStream::new(seed, 0);
        let x: Vec<f64> = (0..op.ncols()).map(|_| s.uniform()).collect();
        let hx = op.apply(&x).unwrap();
        let mut folded = vec![0.0; op.ncols()];
        for i in 0..op.nrows() {
            let row = op.row(i).unwrap();
            row.validate().unwrap();
            assert!((row.dot(&x) - hx[i]).abs() < 1e-12, "row {i}");
            for (&j, &w) in row.indices.iter().zip(&row.weights) {
                folded[j] += w;
            }
        }
        for (a, b) in folded.iter().zip(op.col_sums()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_examples() {
        let op = IdentityOperator::new(6);
        assert_eq!(op.apply(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap()[..3], [1.0, 2.0, 3.0]);
        let r = op.row(4).unwrap();
        assert_eq!((r.indices, r.weights), (vec![4], vec![1.0]));
        assert_eq!(op.col_sums(), &[1.0; 6]);
        assert!(op.apply(&[1.0]).is_err());
        assert!(matches!(op.row(6), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let op = ConvolutionOperator::new(k, (3, 3), (3, 3), Boundary::Periodic).unwrap();
        let x: Vec<f64> = (0..9).map(|v| v as f64 * 0.5).collect();
        assert_eq!(op.apply(&x).unwrap(), x);
    }

    #[test]
    fn periodic_1d_row_unrolling() {
        let op =
            ConvolutionOperator::new(vec![0.25, 0.5, 0.25], (1, 3), (1, 4), Boundary::Periodic)
                .unwrap();
        let r = op.row(0).unwrap();
        assert_eq!(r.indices, vec![0, 1, 3]);
        assert_eq!(r.weights, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn convolution_column_sums() {
        let k = gaussian_kernel(5, 1.0).unwrap();
        let per = ConvolutionOperator::new(k.clone(), (5, 5), (8, 8), Boundary::Periodic).unwrap();
        for &c in per.col_sums() {
            assert!((c - 1.0).abs() < 1e-12);
        }
        let zp = ConvolutionOperator::new(k, (5, 5), (8, 8), Boundary::ZeroPad).unwrap();
        let cs = zp.col_sums();
        let interior = cs[3 * 8 + 3];
        assert!((interior - 1.0).abs() < 1e-12);
        for c in 0..8 {
            assert!(cs[c] < interior && cs[7 * 8 + c] < interior);
            assert!(cs[c * 8] < interior && cs[c * 8 + 7] < interior);
        }
    }

    #[test]
    fn kernel_larger_than_image_merges_taps() {
        let op = ConvolutionOperator::new(vec![1.0; 5], (1, 5), (1, 2), Boundary::Periodic)
            .unwrap();
        let r = op.row(0).unwrap();
        r.validate().unwrap();
        assert_eq!(r.indices, vec![0, 1]);
        assert_eq!(r.weights.iter().sum::<f64>(), 5.0);
        check_row_consistency(&op, 1);
    }

    #[test]
    fn convolution_rejects_bad_kernels() {
        assert!(ConvolutionOperator::new(vec![0.0; 9], (3, 3), (4, 4), Boundary::Periodic).is_err());
        assert!(ConvolutionOperator::new(vec![-1.0, 2.0, 0.0], (1, 3), (4, 4), Boundary::Periodic)
            .is_err());
        assert!(gaussian_kernel(4, 1.0).is_err());
    }

    #[test]
    fn row_apply_consistency_up_to_64() {
        let k = gaussian_kernel(7, 1.6).unwrap();
        for (n, b) in [(16, Boundary::Periodic), (64, Boundary::ZeroPad), (64, Boundary::Periodic)] {
            let op = ConvolutionOperator::new(k.clone(), (7, 7), (n, n), b).unwrap();
            check_row_consistency(&op, n as u64);
        }
        let proj = build_projector(ProjectorGeometry::uniform(64, 64, 30)).unwrap();
        check_row_consistency(&proj, 5);
    }

    #[test]
    fn horizontal_ray_through_two_pixels() {
        let g = ProjectorGeometry {
            height: 1,
            width: 2,
            angles: vec![0.0],
            detector_count: 1,
            detector_spacing: 1.0,
        };
        let p = build_projector(g).unwrap();
        assert_eq!(p.nrows(), 1);
        let (a, b) = (0.7, 2.9);
        assert!((p.apply(&[a, b]).unwrap()[0] - (a + b)).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_angle_zero() {
        let g = ProjectorGeometry {
            height: 2,
            width: 2,
            angles: vec![0.0],
            detector_count: 2,
            detector_spacing: 1.0,
        };
        let p = build_projector(g).unwrap();
        // Detector 1 sits at +0.5, the centre line of pixel row 0.
        let r = p.row(1).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
        for w in r.weights {
            assert!((w - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.row(0).unwrap().indices, vec![2, 3]);
    }

    #[test]
    fn missing_rays_are_dropped() {
        let g = ProjectorGeometry {
            height: 4,
            width: 4,
            angles: vec![0.0],
            detector_count: 12,
            detector_spacing: 1.0,
        };
        let p = build_projector(g).unwrap();
        assert_eq!(p.nrows(), 4);
        assert_eq!(p.dropped_rays(), 8);
        p.validate().unwrap();
    }

    #[test]
    fn half_turn_reverses_detectors() {
        let mk = |angle: f64| {
            build_projector(ProjectorGeometry {
                height: 5,
                width: 7,
                angles: vec![angle],
                detector_count: 9,
                detector_spacing: 0.9,
            })
            .unwrap()
        };
        for base in [0.0, 0.3, 1.1] {
            let p0 = mk(base);
            let p1 = mk(base + std::f64::consts::PI);
            assert_eq!(p0.rays().len(), p1.rays().len());
            let d = 9;
            for (i, &(_, k)) in p0.rays().iter().enumerate() {
                let i1 = p1.rays().iter().position(|&(_, k1)| k1 == d - 1 - k).unwrap();
                let (r0, r1) = (p0.row(i).unwrap(), p1.row(i1).unwrap());
                assert_eq!(r0.indices, r1.indices, "angle {base}, detector {k}");
                for (a, b) in r0.weights.iter().zip(&r1.weights) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn projector_adjoint_identity() {
        let p = build_projector(ProjectorGeometry::uniform(16, 16, 12)).unwrap();
        let mut s = RandomStream::new(9, 0);
        let x: Vec<f64> = (0..p.ncols()).map(|_| s.uniform()).collect();
        let u: Vec<f64> = (0..p.nrows()).map(|_| s.uniform()).collect();
        let lhs: f64 = p.apply(&x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(apply_transpose(&p, &u)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn projector_is_deterministic_and_nonnegative() {
        let a = build_projector(ProjectorGeometry::uniform(12, 12, 7)).unwrap();
        let b = build_projector(ProjectorGeometry::uniform(12, 12, 7)).unwrap();
        for i in 0..a.nrows() {
            let (ra, rb) = (a.row(i).unwrap(), b.row(i).unwrap());
            assert_eq!(ra, rb);
            // A chord through a unit pixel is at most sqrt 2 long.
            assert!(ra.weights.iter().all(|&w| w > 0.0 && w <= 2f64.sqrt() + 1e-12));
        }
        assert_eq!(ProjectorGeometry::uniform(64, 64, 60).detector_count, 91);
    }

    #[test]
    fn geometry_toml_round_trip() {
        let g = ProjectorGeometry::uniform(32, 32, 10);
        let back = ProjectorGeometry::from_toml(&g.to_toml().unwrap()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn dense_operator_rejects_empty_rows() {
        let op = SparseOperator::from_dense(2, 2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(op.validate().is_err());
        assert!(SparseOperator::from_dense(1, 2, &[1.0, -0.5]).is_err());
    }
}
