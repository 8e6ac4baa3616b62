//! Measurement models and synthetic ground truths.
//!
//! Covers the measurement operators (identity, fixed linear matrix,
//! image-defined 2-D energy density, masked Fourier rows, sparse
//! visibilities), Cartesian undersampling masks, uv tables, analytic
//! phantoms, and the zero-filled baseline reconstruction.
//!
//! All linear operators expose `apply` and `adjoint`; the quadratic-fidelity
//! gradient used in training is `Re[A^H (A x - y)] / sigma^2`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::diffcore::CustomVjp;
use crate::error::{Error, Result};
use crate::sampling::inverse_normal_cdf;

/// Cartesian row-undersampling mask in shifted k-space (the DC row sits at
/// `height / 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub kept_rows: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub accel: f64,
    pub center_fraction: f64,
}

impl SamplingMask {
    pub fn n_kept(&self) -> usize {
        self.kept_rows.len()
    }

    /// Writes one kept row index per line under a `row` header.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = self.kept_rows.iter().map(|&r| vec![r as f64]).collect();
        crate::io::write_csv(path, &["row"], &rows)
    }

    pub fn load_csv(path: &Path, height: usize, width: usize) -> Result<SamplingMask> {
        let rows = crate::io::read_csv(path)?;
        let mut kept: Vec<usize> = rows
            .iter()
            .map(|r| {
                if r.is_empty() || r[0] < 0.0 || r[0].fract() != 0.0 || r[0] as usize >= height {
                    Err(Error::Parse(format!("bad mask row entry {:?}", r)))
                } else {
                    Ok(r[0] as usize)
                }
            })
            .collect::<Result<_>>()?;
        kept.sort_unstable();
        kept.dedup();
        let accel = height as f64 / kept.len() as f64;
        Ok(SamplingMask { kept_rows: kept, height, width, accel, center_fraction: 0.0 })
    }
}

/// Builds a mask that keeps `round(height / accel)` rows: a contiguous
/// center block of `round(height * center_fraction)` rows plus uniformly
/// random others. Deterministic per seed.
pub fn make_cartesian_mask(
    height: usize,
    width: usize,
    accel: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if height == 0 || width == 0 {
        return Err(Error::config("mask needs height, width >= 1"));
    }
    if accel < 1.0 {
        return Err(Error::config(format!("acceleration must be >= 1, got {accel}")));
    }
    if !(0.0..=1.0 / accel).contains(&center_fraction) {
        return Err(Error::config(format!(
            "center_fraction must lie in [0, 1/accel], got {center_fraction}"
        )));
    }
    let n_keep = (height as f64 / accel).round() as usize;
    let n_center = (height as f64 * center_fraction).round() as usize;
    if n_keep == 0 || n_center > n_keep {
        return Err(Error::config(format!(
            "infeasible mask: keep {n_keep} rows with {n_center} center rows"
        )));
    }
    let start = (height - n_center) / 2;
    let center: Vec<usize> = (start..start + n_center).collect();
    let mut rest: Vec<usize> = (0..height).filter(|r| !center.contains(r)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let mut kept = center;
    kept.extend(rest.into_iter().take(n_keep - n_center));
    kept.sort_unstable();
    Ok(SamplingMask { kept_rows: kept, height, width, accel, center_fraction })
}

/// Sparse spatial-frequency sampling table.
#[derive(Debug, Clone, PartialEq)]
pub struct UvTable {
    pub points: Vec<(f64, f64)>,
    pub noise_sigma: Vec<f64>,
}

impl UvTable {
    pub fn new(points: Vec<(f64, f64)>, noise_sigma: Vec<f64>) -> Result<UvTable> {
        if points.len() != noise_sigma.len() {
            return Err(Error::dimension(format!(
                "uv table has {} points but {} noise entries",
                points.len(),
                noise_sigma.len()
            )));
        }
        for (i, a) in points.iter().enumerate() {
            for b in &points[i + 1..] {
                if a == b {
                    return Err(Error::config(format!("duplicate uv point ({}, {})", a.0, a.1)));
                }
            }
        }
        Ok(UvTable { points, noise_sigma })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Random radially weighted uv coverage plus the DC point, constant sigma.
    pub fn synthetic(n_points: usize, max_freq: f64, sigma: f64, seed: u64) -> Result<UvTable> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = vec![(0.0, 0.0)];
        while points.len() < n_points {
            let r = max_freq * rng.random::<f64>().sqrt();
            let th = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            let p = (r * th.cos(), r * th.sin());
            if !points.contains(&p) {
                points.push(p);
            }
        }
        let sigmas = vec![sigma; points.len()];
        UvTable::new(points, sigmas)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = self
            .points
            .iter()
            .zip(&self.noise_sigma)
            .map(|(&(u, v), &s)| vec![u, v, s])
            .collect();
        crate::io::write_csv(path, &["u", "v", "sigma"], &rows)
    }

    pub fn load_csv(path: &Path) -> Result<UvTable> {
        let rows = crate::io::read_csv(path)?;
        let mut points = Vec::with_capacity(rows.len());
        let mut sigma = Vec::with_capacity(rows.len());
        for r in rows {
            if r.len() != 3 {
                return Err(Error::Parse("uv csv needs columns u,v,sigma".into()));
            }
            points.push((r[0], r[1]));
            sigma.push(r[2]);
        }
        UvTable::new(points, sigma)
    }
}

/// Unitary 2-D FFT plans for a fixed image size.
#[derive(Clone)]
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2").field("h", &self.h).field("w", &self.w).finish()
    }
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            col_fwd: planner.plan_fft_forward(h),
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn transform(&self, data: &mut [Complex64], forward: bool) {
        let (h, w) = (self.h, self.w);
        debug_assert_eq!(data.len(), h * w);
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        for r in data.chunks_mut(w) {
            row.process(r);
        }
        let mut scratch = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                scratch[i] = data[i * w + j];
            }
            col.process(&mut scratch);
            for i in 0..h {
                data[i * w + j] = scratch[i];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    /// Unitary forward 2-D DFT.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    /// Unitary inverse 2-D DFT.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }
}

/// Unshifted row for a shifted k-space index: DC (unshifted row 0) sits at
/// shifted row `h / 2`.
fn unshift_row(s: usize, h: usize) -> usize {
    (s + h - h / 2) % h
}

/// Image-defined density on the unit square: density proportional to the
/// bilinear interpolation of pixel intensities, cell masses normalized to 1,
/// log-density floored where the intensity vanishes.
#[derive(Debug, Clone)]
pub struct ImageDensity2d {
    /// Density value at each pixel center (intensity * H * W / total).
    density: Array2<f64>,
    /// Per-cell probability masses (sum to 1).
    masses: Array2<f64>,
    floor: f64,
}

impl ImageDensity2d {
    pub fn floor_log_density(&self) -> f64 {
        self.floor.ln()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.density.dim()
    }

    pub fn cell_masses(&self) -> &Array2<f64> {
        &self.masses
    }

    fn bilinear(&self, u: f64, v: f64) -> (f64, f64, f64) {
        let (h, w) = self.density.dim();
        // Pixel centers at ((j + 0.5) / W, (i + 0.5) / H); clamp to edges.
        let gx = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let gy = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let j0 = gx.floor() as usize;
        let i0 = gy.floor() as usize;
        let j1 = (j0 + 1).min(w - 1);
        let i1 = (i0 + 1).min(h - 1);
        let fx = gx - j0 as f64;
        let fy = gy - i0 as f64;
        let d00 = self.density[[i0, j0]];
        let d01 = self.density[[i0, j1]];
        let d10 = self.density[[i1, j0]];
        let d11 = self.density[[i1, j1]];
        let val = d00 * (1.0 - fx) * (1.0 - fy)
            + d01 * fx * (1.0 - fy)
            + d10 * (1.0 - fx) * fy
            + d11 * fx * fy;
        // Partials w.r.t. u and v (zero where the clamp saturates).
        let interior_x = (0.0..=((w - 1) as f64)).contains(&(u * w as f64 - 0.5));
        let interior_y = (0.0..=((h - 1) as f64)).contains(&(v * h as f64 - 0.5));
        let dvdx = if interior_x {
            ((d01 - d00) * (1.0 - fy) + (d11 - d10) * fy) * w as f64
        } else {
            0.0
        };
        let dvdy = if interior_y {
            ((d10 - d00) * (1.0 - fx) + (d11 - d01) * fx) * h as f64
        } else {
            0.0
        };
        (val, dvdx, dvdy)
    }

    /// Squared distance to the unit square and its gradient, for points that
    /// strayed outside the supported domain.
    fn outside(u: f64, v: f64) -> (f64, f64, f64) {
        let du = if u < 0.0 {
            u
        } else if u > 1.0 {
            u - 1.0
        } else {
            0.0
        };
        let dv = if v < 0.0 {
            v
        } else if v > 1.0 {
            v - 1.0
        } else {
            0.0
        };
        (du * du + dv * dv, 2.0 * du, 2.0 * dv)
    }

    /// Log-density at `(u, v)`. Outside the unit square the floored boundary
    /// value decays quadratically so optimizers are pulled back in.
    pub fn log_density(&self, u: f64, v: f64) -> f64 {
        let (val, _, _) = self.bilinear(u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
        let (d2, _, _) = Self::outside(u, v);
        val.max(self.floor).ln() - OUTSIDE_STIFFNESS * d2
    }

    /// Gradient of [`Self::log_density`].
    pub fn grad_log_density(&self, u: f64, v: f64) -> (f64, f64) {
        let uc = u.clamp(0.0, 1.0);
        let vc = v.clamp(0.0, 1.0);
        let (val, dx, dy) = self.bilinear(uc, vc);
        let (_, gdu, gdv) = Self::outside(u, v);
        if val > self.floor && gdu == 0.0 && gdv == 0.0 {
            (dx / val, dy / val)
        } else {
            (-OUTSIDE_STIFFNESS * gdu, -OUTSIDE_STIFFNESS * gdv)
        }
    }

    /// Draws `n` points from the cell-mass distribution, uniform within each
    /// chosen cell.
    pub fn grid_sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let (h, w) = self.masses.dim();
        let mut cumulative = Vec::with_capacity(h * w);
        let mut acc = 0.0;
        for &m in self.masses.iter() {
            acc += m;
            cumulative.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array2::zeros((n, 2));
        for s in 0..n {
            let t: f64 = rng.random();
            let cell = cumulative.partition_point(|&c| c < t).min(h * w - 1);
            let i = cell / w;
            let j = cell % w;
            out[[s, 0]] = (j as f64 + rng.random::<f64>()) / w as f64;
            out[[s, 1]] = (i as f64 + rng.random::<f64>()) / h as f64;
        }
        out
    }
}

const OUTSIDE_STIFFNESS: f64 = 50.0;

/// Builds the 2-D density defined by a grayscale image.
pub fn image_energy_density(image: &Array2<f64>) -> Result<ImageDensity2d> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::config("image must be nonempty"));
    }
    if image.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::config("image intensities must be finite and >= 0"));
    }
    let total: f64 = image.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("image must have at least one positive pixel"));
    }
    let npix = (h * w) as f64;
    let density = image.mapv(|v| v / total * npix);
    let masses = image.mapv(|v| v / total);
    Ok(ImageDensity2d { density, masses, floor: 1e-6 / npix })
}

/// Measurement operator: maps a flat image (or point) to measurement space.
#[derive(Debug, Clone)]
pub enum ForwardOperator {
    Identity { dim: usize },
    LinearMatrix { matrix: Array2<f64> },
    ImageEnergy { density: Arc<ImageDensity2d> },
    MaskedFft { mask: SamplingMask, fft: Fft2 },
    SparseVisibility { height: usize, width: usize, uv: Arc<UvTable>, matrix: Arc<Vec<Complex64>> },
}

impl ForwardOperator {
    pub fn identity(dim: usize) -> Self {
        ForwardOperator::Identity { dim }
    }

    pub fn linear(matrix: Array2<f64>) -> Self {
        ForwardOperator::LinearMatrix { matrix }
    }

    pub fn image_energy(density: ImageDensity2d) -> Self {
        ForwardOperator::ImageEnergy { density: Arc::new(density) }
    }

    pub fn masked_fft(mask: SamplingMask) -> Self {
        let fft = Fft2::new(mask.height, mask.width);
        ForwardOperator::MaskedFft { mask, fft }
    }

    /// Precomputes the visibility phase matrix for an `height x width` image.
    pub fn sparse_visibility(height: usize, width: usize, uv: UvTable) -> Self {
        let mut matrix = Vec::with_capacity(uv.len() * height * width);
        for &(u, v) in &uv.points {
            for py in 0..height {
                for px in 0..width {
                    let phase = -2.0
                        * std::f64::consts::PI
                        * (u * px as f64 / width as f64 + v * py as f64 / height as f64);
                    matrix.push(Complex64::new(phase.cos(), phase.sin()));
                }
            }
        }
        ForwardOperator::SparseVisibility { height, width, uv: Arc::new(uv), matrix: Arc::new(matrix) }
    }

    /// Flat input length.
    pub fn input_dim(&self) -> usize {
        match self {
            ForwardOperator::Identity { dim } => *dim,
            ForwardOperator::LinearMatrix { matrix } => matrix.ncols(),
            ForwardOperator::ImageEnergy { .. } => 2,
            ForwardOperator::MaskedFft { mask, .. } => mask.height * mask.width,
            ForwardOperator::SparseVisibility { height, width, .. } => height * width,
        }
    }

    /// Measurement length (complex entries for the Fourier operators).
    pub fn output_len(&self) -> usize {
        match self {
            ForwardOperator::Identity { dim } => *dim,
            ForwardOperator::LinearMatrix { matrix } => matrix.nrows(),
            ForwardOperator::ImageEnergy { .. } => 0,
            ForwardOperator::MaskedFft { mask, .. } => mask.n_kept() * mask.width,
            ForwardOperator::SparseVisibility { uv, .. } => uv.len(),
        }
    }

    /// Expected image shape, when the operator acts on images.
    pub fn image_shape(&self) -> Option<(usize, usize)> {
        match self {
            ForwardOperator::MaskedFft { mask, .. } => Some((mask.height, mask.width)),
            ForwardOperator::SparseVisibility { height, width, .. } => Some((*height, *width)),
            _ => None,
        }
    }

    /// Applies the operator to one flat input.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dimension(format!(
                "operator input has {} entries, expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        match self {
            ForwardOperator::Identity { .. } => {
                Ok(x.iter().map(|&v| Complex64::new(v, 0.0)).collect())
            }
            ForwardOperator::LinearMatrix { matrix } => Ok(matrix
                .rows()
                .into_iter()
                .map(|row| {
                    let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    Complex64::new(s, 0.0)
                })
                .collect()),
            ForwardOperator::ImageEnergy { .. } => Err(Error::config(
                "image-energy targets define a log-density, not a measurement",
            )),
            ForwardOperator::MaskedFft { mask, fft } => {
                let (h, w) = (mask.height, mask.width);
                let mut k: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft.forward(&mut k);
                let mut out = Vec::with_capacity(mask.n_kept() * w);
                for &s in &mask.kept_rows {
                    let u = unshift_row(s, h);
                    out.extend_from_slice(&k[u * w..(u + 1) * w]);
                }
                Ok(out)
            }
            ForwardOperator::SparseVisibility { uv, matrix, height, width, .. } => {
                let hw = height * width;
                Ok((0..uv.len())
                    .map(|p| {
                        let row = &matrix[p * hw..(p + 1) * hw];
                        row.iter().zip(x).map(|(m, &v)| m * v).sum()
                    })
                    .collect())
            }
        }
    }

    /// Adjoint applied to a measurement-space vector, restricted to the real
    /// image domain.
    pub fn adjoint(&self, v: &[Complex64]) -> Result<Vec<f64>> {
        if v.len() != self.output_len() {
            return Err(Error::dimension(format!(
                "adjoint input has {} entries, expected {}",
                v.len(),
                self.output_len()
            )));
        }
        match self {
            ForwardOperator::Identity { .. } => Ok(v.iter().map(|c| c.re).collect()),
            ForwardOperator::LinearMatrix { matrix } => {
                let mut out = vec![0.0; matrix.ncols()];
                for (row, c) in matrix.rows().into_iter().zip(v) {
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += a * c.re;
                    }
                }
                Ok(out)
            }
            ForwardOperator::ImageEnergy { .. } => Err(Error::config(
                "image-energy targets define a log-density, not a measurement",
            )),
            ForwardOperator::MaskedFft { mask, fft } => {
                let (h, w) = (mask.height, mask.width);
                let mut k = vec![Complex64::new(0.0, 0.0); h * w];
                for (ri, &s) in mask.kept_rows.iter().enumerate() {
                    let u = unshift_row(s, h);
                    k[u * w..(u + 1) * w].copy_from_slice(&v[ri * w..(ri + 1) * w]);
                }
                fft.inverse(&mut k);
                Ok(k.iter().map(|c| c.re).collect())
            }
            ForwardOperator::SparseVisibility { matrix, height, width, uv, .. } => {
                let hw = height * width;
                let mut out = vec![0.0; hw];
                for p in 0..uv.len() {
                    let row = &matrix[p * hw..(p + 1) * hw];
                    for (o, m) in out.iter_mut().zip(row) {
                        *o += (m.conj() * v[p]).re;
                    }
                }
                Ok(out)
            }
        }
    }

    /// `||y - A x||^2` over complex entries.
    pub fn residual_norm_sq(&self, x: &[f64], y: &[Complex64]) -> Result<f64> {
        let ax = self.apply(x)?;
        Ok(ax.iter().zip(y).map(|(a, b)| (a - b).norm_sqr()).sum())
    }
}

/// Complex Gaussian noise: independent `N(0, sigma^2)` on the real and
/// imaginary parts of each entry.
fn add_complex_noise(values: &mut [Complex64], sigma: impl Fn(usize) -> f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, v) in values.iter_mut().enumerate() {
        let s = sigma(i);
        let re = inverse_normal_cdf(rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12));
        let im = inverse_normal_cdf(rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12));
        *v += Complex64::new(s * re, s * im);
    }
}

/// Masked-Fourier measurement of an image: unitary 2-D DFT restricted to the
/// mask's kept rows, flattened row-major, with optional complex Gaussian
/// noise of scale `sigma`.
pub fn masked_fft_forward(
    image: &Array2<f64>,
    mask: &SamplingMask,
    sigma: f64,
    noise_seed: Option<u64>,
) -> Result<Vec<Complex64>> {
    if image.dim() != (mask.height, mask.width) {
        return Err(Error::dimension(format!(
            "image {:?} does not match mask {}x{}",
            image.dim(),
            mask.height,
            mask.width
        )));
    }
    let op = ForwardOperator::masked_fft(mask.clone());
    let flat: Vec<f64> = image.iter().cloned().collect();
    let mut out = op.apply(&flat)?;
    if let Some(seed) = noise_seed {
        add_complex_noise(&mut out, |_| sigma, seed);
    }
    Ok(out)
}

/// Sparse visibilities `V(u,v) = sum_p I(p) exp(-2 pi i (u px / W + v py / H))`
/// with optional per-point complex Gaussian noise from the table.
pub fn visibility_forward(
    image: &Array2<f64>,
    uv: &UvTable,
    noise_seed: Option<u64>,
) -> Result<Vec<Complex64>> {
    let (h, w) = image.dim();
    let op = ForwardOperator::sparse_visibility(h, w, uv.clone());
    let flat: Vec<f64> = image.iter().cloned().collect();
    let mut out = op.apply(&flat)?;
    if let Some(seed) = noise_seed {
        let sigmas = uv.noise_sigma.clone();
        add_complex_noise(&mut out, |i| sigmas[i], seed);
    }
    Ok(out)
}

/// Zero-filled baseline: missing k-space rows set to zero, inverse unitary
/// DFT, real part.
pub fn zero_filled_recon(measurement: &[Complex64], mask: &SamplingMask) -> Result<Array2<f64>> {
    let op = ForwardOperator::masked_fft(mask.clone());
    let flat = op.adjoint(measurement)?;
    Ok(Array2::from_shape_vec((mask.height, mask.width), flat).expect("shape"))
}

/// Synthetic phantom kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhantomKind {
    SheppLoganLike,
    /// Annulus; `asymmetry` in [0, 1) adds a left-right brightness gradient
    /// so 180-degree rotational symmetry is broken on purpose.
    Ring { asymmetry: f64 },
    TwoBlob,
}

/// Deterministic analytic phantom with intensities in `[0, 1]`.
pub fn make_phantom(kind: PhantomKind, size: usize) -> Result<Array2<f64>> {
    if size < 8 {
        return Err(Error::config(format!("phantom size must be >= 8, got {size}")));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let img = match kind {
        PhantomKind::Ring { asymmetry } => {
            let r0 = 0.32 * size as f64;
            let sr = 0.07 * size as f64;
            Array2::from_shape_fn((size, size), |(i, j)| {
                let dy = i as f64 - c;
                let dx = j as f64 - c;
                let r = (dx * dx + dy * dy).sqrt();
                let base = (-(r - r0) * (r - r0) / (2.0 * sr * sr)).exp();
                let cos_th = if r > 1e-9 { dx / r } else { 0.0 };
                (base * (1.0 + asymmetry * cos_th)).clamp(0.0, 1.0)
            })
        }
        PhantomKind::TwoBlob => {
            let sep = 0.22 * size as f64;
            let s = 0.08 * size as f64;
            Array2::from_shape_fn((size, size), |(i, j)| {
                let dy = i as f64 - c;
                let dx1 = j as f64 - (c - sep);
                let dx2 = j as f64 - (c + sep);
                let b1 = (-(dx1 * dx1 + dy * dy) / (2.0 * s * s)).exp();
                let b2 = 0.85 * (-(dx2 * dx2 + dy * dy) / (2.0 * s * s)).exp();
                (b1 + b2).clamp(0.0, 1.0)
            })
        }
        PhantomKind::SheppLoganLike => {
            // (cx, cy, a, b, angle_deg, additive intensity)
            let ellipses: [(f64, f64, f64, f64, f64, f64); 6] = [
                (0.0, 0.0, 0.72, 0.95, 0.0, 0.8),
                (0.0, 0.0, 0.65, 0.87, 0.0, -0.3),
                (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
                (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
                (0.0, 0.35, 0.21, 0.25, 0.0, 0.25),
                (0.0, -0.45, 0.046, 0.046, 0.0, 0.3),
            ];
            Array2::from_shape_fn((size, size), |(i, j)| {
                let y = (i as f64 - c) / (size as f64 / 2.0);
                let x = (j as f64 - c) / (size as f64 / 2.0);
                let mut v = 0.0;
                for &(cx, cy, a, b, ang, inten) in &ellipses {
                    let th = ang.to_radians();
                    let xr = (x - cx) * th.cos() + (y - cy) * th.sin();
                    let yr = -(x - cx) * th.sin() + (y - cy) * th.cos();
                    if xr * xr / (a * a) + yr * yr / (b * b) <= 1.0 {
                        v += inten;
                    }
                }
                v.clamp(0.0, 1.0)
            })
        }
    };
    Ok(img)
}

/// Tape op: per-row quadratic data fidelity `||y - A x||^2 / (2 sigma^2)`.
pub struct MeasurementFidelity {
    pub op: Arc<ForwardOperator>,
    pub y: Arc<Vec<Complex64>>,
    pub sigma: f64,
}

impl CustomVjp for MeasurementFidelity {
    fn name(&self) -> &str {
        "measurement_fidelity"
    }

    fn rows_out(&self, n: usize) -> usize {
        n
    }

    fn forward(&self, input: &[f64], n: usize, d: usize) -> Vec<f64> {
        let inv2s2 = 1.0 / (2.0 * self.sigma * self.sigma);
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = &input[i * d..(i + 1) * d];
                inv2s2 * self.op.residual_norm_sq(x, &self.y).expect("fidelity shapes checked")
            })
            .collect();
        rows
    }

    fn vjp(&self, input: &[f64], n: usize, d: usize, out_grad: &[f64], in_grad: &mut [f64]) {
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let grads: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = &input[i * d..(i + 1) * d];
                let mut ax = self.op.apply(x).expect("fidelity shapes checked");
                for (a, b) in ax.iter_mut().zip(self.y.iter()) {
                    *a -= b;
                }
                self.op.adjoint(&ax).expect("fidelity shapes checked")
            })
            .collect();
        for i in 0..n {
            let g = out_grad[i] * inv_s2;
            for (dst, src) in in_grad[i * d..(i + 1) * d].iter_mut().zip(&grads[i]) {
                *dst += g * src;
            }
        }
    }
}

/// Tape op: per-row negative log-density of an image-defined 2-D target.
pub struct EnergyNegLogDensity {
    pub density: Arc<ImageDensity2d>,
}

impl CustomVjp for EnergyNegLogDensity {
    fn name(&self) -> &str {
        "energy_neg_log_density"
    }

    fn rows_out(&self, n: usize) -> usize {
        n
    }

    fn forward(&self, input: &[f64], n: usize, d: usize) -> Vec<f64> {
        assert_eq!(d, 2, "image-energy targets are two-dimensional");
        (0..n).map(|i| -self.density.log_density(input[i * 2], input[i * 2 + 1])).collect()
    }

    fn vjp(&self, input: &[f64], n: usize, d: usize, out_grad: &[f64], in_grad: &mut [f64]) {
        assert_eq!(d, 2);
        for i in 0..n {
            let (gu, gv) = self.density.grad_log_density(input[i * 2], input[i * 2 + 1]);
            in_grad[i * 2] -= out_grad[i] * gu;
            in_grad[i * 2 + 1] -= out_grad[i] * gv;
        }
    }
}
