//! Spatially-variant, per-wavelength point-spread functions.
//!
//! A PSF kernel is built by tracing a collimated bundle through the lens,
//! then Gaussianizing each surviving image-plane intersection: every hit
//! contributes `E(m,n) = exp(−r²/2σ²)/(√(2π)σ)` to pixels within 3σ, with σ
//! derived from the local spacing of neighboring rays. One kernel per
//! (image patch, wavelength) forms a [`PsfGrid`].

mod stack;

pub use stack::{load_psf_stack, save_psf_stack};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optics::{
    field_direction, paraxial_trace, trace_to_image, LensPrescription, RayOutcome, D_LINE_UM,
    RGB_WAVELENGTHS_UM,
};

/// Pupil sample positions on the stop plane, laid out on a square grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PupilSampling {
    /// Points (x, y) in mm, all inside the aperture circle.
    pub points: Vec<(f64, f64)>,
    /// Requested ray count (the kept count is the length of `points`).
    pub target_count: usize,
    /// Side length of the underlying square grid.
    pub grid_dim: usize,
    /// Grid cell (i, j) of each point, parallel to `points`.
    pub grid_indices: Vec<(u32, u32)>,
    pub aperture_radius_mm: f64,
}

/// Uniform square-grid sampling over the circumscribing square of the
/// aperture, keeping points inside the circle. Cell centers sit at
/// half-integer offsets, so the set is symmetric under (x,y) → (−x,−y).
pub fn sample_pupil(aperture_radius_mm: f64, target_count: usize) -> Result<PupilSampling> {
    if !(aperture_radius_mm > 0.0) {
        return Err(Error::Config(format!(
            "aperture radius must be positive, got {aperture_radius_mm}"
        )));
    }
    if target_count < 4 {
        return Err(Error::Config("pupil sampling needs at least 4 target rays".into()));
    }
    let m = (target_count as f64).sqrt().ceil() as usize;
    let step = 2.0 * aperture_radius_mm / m as f64;
    let r2 = aperture_radius_mm * aperture_radius_mm;
    let mut points = Vec::new();
    let mut grid_indices = Vec::new();
    for i in 0..m {
        for j in 0..m {
            let x = -aperture_radius_mm + (i as f64 + 0.5) * step;
            let y = -aperture_radius_mm + (j as f64 + 0.5) * step;
            if x * x + y * y <= r2 {
                points.push((x, y));
                grid_indices.push((i as u32, j as u32));
            }
        }
    }
    Ok(PupilSampling {
        points,
        target_count,
        grid_dim: m,
        grid_indices,
        aperture_radius_mm,
    })
}

/// One k×k PSF kernel, unit-normalized, window centered on the ideal
/// paraxial image point of its field angle.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    pub size: usize,
    /// Row-major k×k energy weights, Σ = 1.
    pub weights: Vec<f64>,
    pub pixel_pitch_um: f64,
    /// Measured centroid offset (dx, dy) from the window center, pixels.
    /// Nonzero offsets carry geometric distortion and lateral color.
    pub center_offset: (f64, f64),
    /// Energy fraction that fell outside the window before renormalization.
    pub clipped_fraction: f64,
}

impl PsfKernel {
    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Centroid (dx, dy) in pixels relative to the window center.
    pub fn centroid_px(&self) -> (f64, f64) {
        let c = (self.size as f64 - 1.0) / 2.0;
        let (mut dx, mut dy, mut total) = (0.0, 0.0, 0.0);
        for a in 0..self.size {
            for b in 0..self.size {
                let w = self.weight(a, b);
                dx += w * (b as f64 - c);
                dy += w * (a as f64 - c);
                total += w;
            }
        }
        (dx / total, dy / total)
    }

    pub fn l1_diff(&self, other: &Self) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// Rotate the kernel a quarter turn: with rows growing along +y, this is
    /// the image of a +90° physical rotation about the window center.
    pub fn rotated_quarter_turn(&self) -> Self {
        let k = self.size;
        let mut out = self.clone();
        for i in 0..k {
            for j in 0..k {
                out.weights[i * k + j] = self.weights[(k - 1 - j) * k + i];
            }
        }
        let (dx, dy) = self.center_offset;
        out.center_offset = (-dy, dx);
        out
    }

    /// Resample the kernel shifted by (−dx, −dy) pixels with bilinear
    /// interpolation, so a kernel with centroid offset (dx, dy) becomes
    /// centered. Mass pushed outside the window is dropped and the kernel is
    /// renormalized. A sub-nanopixel shift returns the kernel unchanged.
    pub fn recentered(&self) -> Self {
        let (dx, dy) = self.center_offset;
        if dx.abs() < 1e-9 && dy.abs() < 1e-9 {
            return self.clone();
        }
        let k = self.size as isize;
        let mut out = self.clone();
        let sample = |a: f64, b: f64| -> f64 {
            let (a0, b0) = (a.floor(), b.floor());
            let (fa, fb) = (a - a0, b - b0);
            let mut acc = 0.0;
            for (da, wa) in [(0, 1.0 - fa), (1, fa)] {
                for (db, wb) in [(0, 1.0 - fb), (1, fb)] {
                    let (ai, bi) = (a0 as isize + da, b0 as isize + db);
                    if ai >= 0 && ai < k && bi >= 0 && bi < k {
                        acc += wa * wb * self.weights[(ai * k + bi) as usize];
                    }
                }
            }
            acc
        };
        for a in 0..self.size {
            for b in 0..self.size {
                out.weights[a * self.size + b] = sample(a as f64 + dy, b as f64 + dx);
            }
        }
        let total: f64 = out.weights.iter().sum();
        if total > 0.0 {
            for w in &mut out.weights {
                *w /= total;
            }
        }
        out.center_offset = out.centroid_px();
        out
    }
}

/// RMS spot radius of a hit cloud about its centroid, in µm.
pub fn rms_spot_radius(hits: &[(f64, f64)]) -> Result<f64> {
    if hits.len() < 2 {
        return Err(Error::DegenerateField(format!(
            "RMS spot radius needs at least 2 hits, got {}",
            hits.len()
        )));
    }
    let n = hits.len() as f64;
    let (cx, cy) = hits
        .iter()
        .fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (cx, cy) = (cx / n, cy / n);
    let ms = hits
        .iter()
        .map(|(x, y)| (x - cx) * (x - cx) + (y - cy) * (y - cy))
        .sum::<f64>()
        / n;
    Ok(ms.sqrt() * 1000.0)
}

/// Superimpose one truncated Gaussian per hit onto a k×k pixel window
/// centered at `center_mm`, then renormalize to unit sum.
///
/// `sigmas_mm` gives each hit's Gaussian width; pass the same value for all
/// hits for a uniform splat. `clipped_fraction` reports the energy share
/// that fell outside the window before renormalization.
pub fn splat_gaussian(
    hits: &[(f64, f64)],
    sigmas_mm: &[f64],
    pixel_pitch_um: f64,
    kernel_size: usize,
    center_mm: (f64, f64),
) -> Result<PsfKernel> {
    if hits.is_empty() {
        return Err(Error::DegenerateField("no live hits to splat".into()));
    }
    if hits.len() != sigmas_mm.len() {
        return Err(Error::Shape(format!(
            "{} hits but {} sigmas",
            hits.len(),
            sigmas_mm.len()
        )));
    }
    if kernel_size % 2 == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {kernel_size}")));
    }
    if !(pixel_pitch_um > 0.0) {
        return Err(Error::Config("pixel pitch must be positive".into()));
    }
    let k = kernel_size;
    let pitch_mm = pixel_pitch_um * 1e-3;
    let c = (k as f64 - 1.0) / 2.0;
    // Keep even a degenerate zero-spread splat one representable pixel wide.
    let sigma_floor = pitch_mm * 0.01;
    let mut window = vec![0.0f64; k * k];
    let mut total_energy = 0.0f64;
    let mut window_energy = 0.0f64;
    for (&(hx, hy), &sigma_raw) in hits.iter().zip(sigmas_mm) {
        let sigma = sigma_raw.max(sigma_floor);
        let amp = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
        // Hit position in window pixel coordinates.
        let px = (hx - center_mm.0) / pitch_mm + c;
        let py = (hy - center_mm.1) / pitch_mm + c;
        let reach = 3.0 * sigma / pitch_mm;
        let a_lo = (py - reach).floor() as isize;
        let a_hi = (py + reach).ceil() as isize;
        let b_lo = (px - reach).floor() as isize;
        let b_hi = (px + reach).ceil() as isize;
        let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
        for a in a_lo..=a_hi {
            for b in b_lo..=b_hi {
                let dy = (a as f64 - py) * pitch_mm;
                let dx = (b as f64 - px) * pitch_mm;
                let r2 = dx * dx + dy * dy;
                if r2 > 9.0 * sigma * sigma {
                    continue;
                }
                let e = amp * (-r2 * inv_2s2).exp();
                total_energy += e;
                if a >= 0 && (a as usize) < k && b >= 0 && (b as usize) < k {
                    window[a as usize * k + b as usize] += e;
                    window_energy += e;
                }
            }
        }
    }
    if window_energy <= 0.0 {
        return Err(Error::DegenerateField(
            "all splat energy fell outside the kernel window".into(),
        ));
    }
    let norm: f64 = window.iter().sum();
    for w in &mut window {
        *w /= norm;
    }
    let mut kernel = PsfKernel {
        size: k,
        weights: window,
        pixel_pitch_um,
        center_offset: (0.0, 0.0),
        clipped_fraction: (1.0 - window_energy / total_energy).clamp(0.0, 1.0 - f64::EPSILON),
    };
    kernel.center_offset = kernel.centroid_px();
    Ok(kernel)
}

/// Per-hit Gaussian widths from the local ray-grid spacing on the image
/// plane: for each live hit, Δx/Δy are the mean image-plane distances to its
/// live horizontal/vertical pupil-grid neighbors, and σ = √(Δx²+Δy²)/3.
/// Returns live hits and their σ, in pupil sampling order.
///
/// σ is floored at half a pixel: once the ray grid out-resolves the pixel
/// grid, the point-sampled splat would otherwise depend on sub-pixel
/// alignment instead of converging.
fn neighbor_widths(
    sampling: &PupilSampling,
    outcomes: &[Option<(f64, f64)>],
    pixel_pitch_um: f64,
) -> (Vec<(f64, f64)>, Vec<f64>) {
    let m = sampling.grid_dim;
    let mut cell_to_point = vec![usize::MAX; m * m];
    for (idx, &(i, j)) in sampling.grid_indices.iter().enumerate() {
        cell_to_point[i as usize * m + j as usize] = idx;
    }
    let outcome_at = |i: isize, j: isize| -> Option<(f64, f64)> {
        if i < 0 || j < 0 || i >= m as isize || j >= m as isize {
            return None;
        }
        let idx = cell_to_point[i as usize * m + j as usize];
        if idx == usize::MAX {
            None
        } else {
            outcomes[idx]
        }
    };

    let mut hits = Vec::new();
    let mut spreads: Vec<Option<f64>> = Vec::new();
    for (idx, outcome) in outcomes.iter().enumerate() {
        let Some((hx, hy)) = *outcome else { continue };
        hits.push((hx, hy));
        let (i, j) = sampling.grid_indices[idx];
        let (i, j) = (i as isize, j as isize);
        let mean_dist = |cells: [(isize, isize); 2]| -> Option<f64> {
            let ds: Vec<f64> = cells
                .iter()
                .filter_map(|&(ni, nj)| outcome_at(ni, nj))
                .map(|(nx, ny)| ((nx - hx).powi(2) + (ny - hy).powi(2)).sqrt())
                .collect();
            if ds.is_empty() {
                None
            } else {
                Some(ds.iter().sum::<f64>() / ds.len() as f64)
            }
        };
        let dx = mean_dist([(i - 1, j), (i + 1, j)]);
        let dy = mean_dist([(i, j - 1), (i, j + 1)]);
        spreads.push(match (dx, dy) {
            (Some(dx), Some(dy)) => Some((dx * dx + dy * dy).sqrt() / 3.0),
            (Some(d), None) | (None, Some(d)) => Some(d * std::f64::consts::SQRT_2 / 3.0),
            (None, None) => None,
        });
    }

    let known: Vec<f64> = spreads.iter().filter_map(|s| *s).collect();
    let fallback = if known.is_empty() {
        pixel_pitch_um * 1e-3
    } else {
        known.iter().sum::<f64>() / known.len() as f64
    };
    let sigma_floor = 0.5 * pixel_pitch_um * 1e-3;
    let sigmas = spreads
        .into_iter()
        .map(|s| s.unwrap_or(fallback).max(sigma_floor))
        .collect();
    (hits, sigmas)
}

/// Radial field angle of an (θx, θy) pair, composed via tangents.
fn radial_angle(theta_x: f64, theta_y: f64) -> f64 {
    theta_x.tan().hypot(theta_y.tan()).atan()
}

/// Trace a full pupil bundle at one field angle and wavelength and
/// Gaussianize the surviving hits into a kernel.
///
/// The window is centered on the d-line paraxial image point, so lateral
/// color shows up as per-wavelength centroid offsets.
pub fn trace_field_psf(
    prescription: &LensPrescription,
    field_angle: (f64, f64),
    wavelength_um: f64,
    sampling: &PupilSampling,
    pixel_pitch_um: f64,
    kernel_size: usize,
) -> Result<PsfKernel> {
    let (tx, ty) = field_angle;
    let theta_r = radial_angle(tx, ty);
    let theta_max = prescription.max_half_fov_deg.to_radians();
    if theta_r > theta_max + 1e-12 {
        return Err(Error::Config(format!(
            "field angle {:.4}° beyond the {:.4}° field limit",
            theta_r.to_degrees(),
            prescription.max_half_fov_deg
        )));
    }
    let para_d = paraxial_trace(prescription, D_LINE_UM)?;
    let center = (para_d.efl_mm * tx.tan(), para_d.efl_mm * ty.tan());
    let dir = field_direction(tx, ty);
    let outcomes: Vec<Option<(f64, f64)>> = sampling
        .points
        .iter()
        .map(|&(px, py)| {
            Ok(match trace_to_image(prescription, dir, (px, py), wavelength_um)? {
                RayOutcome::Hit { x, y } => Some((x, y)),
                RayOutcome::Dead => None,
            })
        })
        .collect::<Result<_>>()?;
    let (hits, sigmas) = neighbor_widths(sampling, &outcomes, pixel_pitch_um);
    if hits.is_empty() {
        return Err(Error::DegenerateField(format!(
            "no ray survived at field ({tx:.4}, {ty:.4}) rad"
        )));
    }
    splat_gaussian(&hits, &sigmas, pixel_pitch_um, kernel_size, center)
}

/// Construction parameters for [`build_psf_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct PsfBuildParams {
    pub patch_size_px: usize,
    pub pixel_pitch_um: f64,
    pub wavelengths_um: Vec<f64>,
    pub rays_per_bundle: usize,
    pub kernel_size_px: usize,
    /// Trace every patch at the on-axis field, making the grid spatially
    /// uniform. Useful for toy/identity configurations and tests.
    pub uniform_field: bool,
}

impl Default for PsfBuildParams {
    fn default() -> Self {
        Self {
            patch_size_px: 16,
            pixel_pitch_um: 11.43,
            wavelengths_um: RGB_WAVELENGTHS_UM.to_vec(),
            rays_per_bundle: 1024,
            kernel_size_px: 25,
            uniform_field: false,
        }
    }
}

/// PSF kernels for every (patch, wavelength) pair of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfGrid {
    /// Kernels in [grid_h][grid_w][wavelength] order.
    pub kernels: Vec<PsfKernel>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size_px: usize,
    /// (H, W) of the image the grid was built for.
    pub image_dims: (usize, usize),
    pub pixel_pitch_um: f64,
    pub wavelengths_um: Vec<f64>,
    /// Patches whose field angle exceeded the lens limit; each reuses the
    /// nearest in-field patch's kernels.
    pub out_of_field: Vec<(usize, usize)>,
}

impl PsfGrid {
    pub fn n_wavelengths(&self) -> usize {
        self.wavelengths_um.len()
    }

    #[inline]
    pub fn kernel(&self, gi: usize, gj: usize, wl: usize) -> &PsfKernel {
        &self.kernels[(gi * self.grid_w + gj) * self.n_wavelengths() + wl]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.first().map_or(0, |k| k.size)
    }

    /// Physical (x, y) position of a patch's center pixel, mm, relative to
    /// the image center.
    pub fn patch_center_mm(&self, gi: usize, gj: usize) -> (f64, f64) {
        let (h, w) = self.image_dims;
        let p = self.patch_size_px;
        let row_end = ((gi + 1) * p).min(h);
        let col_end = ((gj + 1) * p).min(w);
        let row_c = (gi * p + row_end - 1) as f64 / 2.0;
        let col_c = (gj * p + col_end - 1) as f64 / 2.0;
        let pitch_mm = self.pixel_pitch_um * 1e-3;
        (
            (col_c - (w as f64 - 1.0) / 2.0) * pitch_mm,
            (row_c - (h as f64 - 1.0) / 2.0) * pitch_mm,
        )
    }
}

/// Build the per-patch, per-wavelength kernel grid for an image.
///
/// Each patch's field angle comes from its center pixel through the inverse
/// paraxial mapping θ = atan(r·pitch/efl); patches beyond the field limit
/// reuse the nearest in-field patch and are listed in `out_of_field`.
pub fn build_psf_grid(
    prescription: &LensPrescription,
    image_dims: (usize, usize),
    params: &PsfBuildParams,
) -> Result<PsfGrid> {
    let (h, w) = image_dims;
    if h == 0 || w == 0 {
        return Err(Error::Config("image dims must be positive".into()));
    }
    if params.patch_size_px == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    if params.wavelengths_um.is_empty() {
        return Err(Error::Config("need at least one wavelength".into()));
    }
    prescription.validate()?;
    let para_d = paraxial_trace(prescription, D_LINE_UM)?;
    let p = params.patch_size_px;
    let grid_h = h.div_ceil(p);
    let grid_w = w.div_ceil(p);
    let sampling = sample_pupil(prescription.aperture_radius_mm, params.rays_per_bundle)?;

    let mut grid = PsfGrid {
        kernels: Vec::new(),
        grid_h,
        grid_w,
        patch_size_px: p,
        image_dims,
        pixel_pitch_um: params.pixel_pitch_um,
        wavelengths_um: params.wavelengths_um.clone(),
        out_of_field: Vec::new(),
    };

    // Classify patches against the field limit up front.
    let r_max_mm = para_d.efl_mm * prescription.max_half_fov_deg.to_radians().tan();
    let mut in_field = vec![true; grid_h * grid_w];
    if !params.uniform_field {
        for gi in 0..grid_h {
            for gj in 0..grid_w {
                let (x, y) = grid.patch_center_mm(gi, gj);
                in_field[gi * grid_w + gj] = x.hypot(y) <= r_max_mm;
            }
        }
    }
    if !in_field.iter().any(|&b| b) {
        return Err(Error::Geometry(
            "every patch lies beyond the field limit; sensor and lens are mismatched".into(),
        ));
    }

    // For an out-of-field patch, the nearest in-field patch by center distance.
    let nearest_in_field = |gi: usize, gj: usize| -> (usize, usize) {
        let (x0, y0) = grid.patch_center_mm(gi, gj);
        let mut best = (0, 0);
        let mut best_d = f64::INFINITY;
        for qi in 0..grid_h {
            for qj in 0..grid_w {
                if !in_field[qi * grid_w + qj] {
                    continue;
                }
                let (x, y) = grid.patch_center_mm(qi, qj);
                let d = (x - x0).hypot(y - y0);
                if d < best_d {
                    best_d = d;
                    best = (qi, qj);
                }
            }
        }
        best
    };

    let field_of = |gi: usize, gj: usize| -> (f64, f64) {
        if params.uniform_field {
            return (0.0, 0.0);
        }
        let (src_i, src_j) = if in_field[gi * grid_w + gj] {
            (gi, gj)
        } else {
            nearest_in_field(gi, gj)
        };
        let (x, y) = grid.patch_center_mm(src_i, src_j);
        ((x / para_d.efl_mm).atan(), (y / para_d.efl_mm).atan())
    };

    let tasks: Vec<(usize, usize, usize)> = (0..grid_h)
        .flat_map(|gi| (0..grid_w).map(move |gj| (gi, gj)))
        .flat_map(|(gi, gj)| (0..params.wavelengths_um.len()).map(move |wl| (gi, gj, wl)))
        .collect();
    let kernels: Vec<PsfKernel> = tasks
        .par_iter()
        .map(|&(gi, gj, wl)| {
            trace_field_psf(
                prescription,
                field_of(gi, gj),
                params.wavelengths_um[wl],
                &sampling,
                params.pixel_pitch_um,
                params.kernel_size_px,
            )
        })
        .collect::<Result<_>>()?;
    grid.kernels = kernels;
    if !params.uniform_field {
        grid.out_of_field = (0..grid_h)
            .flat_map(|gi| (0..grid_w).map(move |gj| (gi, gj)))
            .filter(|&(gi, gj)| !in_field[gi * grid_w + gj])
            .collect();
    }
    Ok(grid)
}

/// Mean per-kernel L2 distance between two grids built for the same image.
///
/// Patch sizes may differ by an integer factor; each finest patch is paired
/// with the coarser patch containing its center. Used to quantify how far
/// apart two optical configurations are.
pub fn grid_l2_distance(a: &PsfGrid, b: &PsfGrid) -> Result<f64> {
    if a.wavelengths_um != b.wavelengths_um {
        return Err(Error::Shape("grids sample different wavelengths".into()));
    }
    if a.kernel_size() != b.kernel_size() {
        return Err(Error::Shape("grids use different kernel sizes".into()));
    }
    if a.image_dims != b.image_dims {
        return Err(Error::Shape("grids cover different image dims".into()));
    }
    let (fine, coarse) = if a.patch_size_px <= b.patch_size_px { (a, b) } else { (b, a) };
    if coarse.patch_size_px % fine.patch_size_px != 0 {
        return Err(Error::Shape(
            "patch sizes must divide for grid comparison".into(),
        ));
    }
    let ratio = coarse.patch_size_px / fine.patch_size_px;
    let mut acc = 0.0;
    let mut n = 0usize;
    for gi in 0..fine.grid_h {
        for gj in 0..fine.grid_w {
            let (ci, cj) = ((gi / ratio).min(coarse.grid_h - 1), (gj / ratio).min(coarse.grid_w - 1));
            for wl in 0..fine.n_wavelengths() {
                let ka = fine.kernel(gi, gj, wl);
                let kb = coarse.kernel(ci, cj, wl);
                let l2: f64 = ka
                    .weights
                    .iter()
                    .zip(&kb.weights)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                acc += l2;
                n += 1;
            }
        }
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{MaterialDispersion, Surface};

    fn singlet(aperture_mm: f64) -> LensPrescription {
        let mut lens = LensPrescription {
            surfaces: vec![
                Surface {
                    curvature: 0.01,
                    thickness_after: 2.0,
                    material_after: Some(MaterialDispersion::from_nd_abbe(1.5168, 64.17).unwrap()),
                    semi_diameter: 9.0,
                },
                Surface {
                    curvature: -0.01,
                    thickness_after: 0.0,
                    material_after: None,
                    semi_diameter: 9.0,
                },
            ],
            max_half_fov_deg: 25.0,
            aperture_radius_mm: aperture_mm,
            image_distance_mm: 0.0,
            focus_shift_mm: 0.0,
        };
        lens.image_distance_mm = paraxial_trace(&lens, D_LINE_UM).unwrap().bfd_mm;
        lens
    }

    #[test]
    fn pupil_sampling_is_symmetric_and_contained() {
        let s = sample_pupil(1.0, 4).unwrap();
        assert_eq!(s.points.len(), 4);
        for &(x, y) in &s.points {
            assert!(x * x + y * y <= 1.0 + 1e-12);
            assert!(s.points.iter().any(|&(px, py)| (px + x).abs() < 1e-12 && (py + y).abs() < 1e-12));
        }
    }

    #[test]
    fn pupil_retention_approaches_quarter_pi() {
        for target in [1024usize, 4096, 10000] {
            let s = sample_pupil(2.5, target).unwrap();
            let grid_points = s.grid_dim * s.grid_dim;
            let frac = s.points.len() as f64 / grid_points as f64;
            assert!(
                (frac - std::f64::consts::FRAC_PI_4).abs() < 0.05,
                "target {target}: retained fraction {frac}"
            );
        }
    }

    #[test]
    fn pupil_sampling_input_validation() {
        assert!(sample_pupil(0.0, 64).is_err());
        assert!(sample_pupil(1.0, 3).is_err());
    }

    #[test]
    fn rms_spot_radius_examples() {
        assert!(rms_spot_radius(&[(0.5, 0.5), (0.5, 0.5), (0.5, 0.5)]).unwrap() < 1e-12);
        let hits = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
        assert!((rms_spot_radius(&hits).unwrap() - 1000.0).abs() < 1e-9);
        assert!(rms_spot_radius(&[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn centered_single_hit_splat_is_fourfold_symmetric() {
        let kernel = splat_gaussian(&[(0.0, 0.0)], &[0.02], 10.0, 11, (0.0, 0.0)).unwrap();
        assert!((kernel.sum() - 1.0).abs() < 1e-9);
        let rot = kernel.rotated_quarter_turn();
        assert!(kernel.l1_diff(&rot) < 1e-12);
        let c = kernel.size / 2;
        let max_idx = kernel
            .weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(max_idx, c * kernel.size + c);
        assert!(kernel.center_offset.0.abs() < 1e-12 && kernel.center_offset.1.abs() < 1e-12);
    }

    #[test]
    fn mirrored_hits_center_the_centroid() {
        let hits = [(0.013, -0.004), (-0.013, 0.004)];
        let kernel = splat_gaussian(&hits, &[0.01, 0.01], 10.0, 15, (0.0, 0.0)).unwrap();
        assert!(kernel.center_offset.0.abs() < 1e-9);
        assert!(kernel.center_offset.1.abs() < 1e-9);
    }

    #[test]
    fn splat_centroid_matches_dense_oracle() {
        // Brute-force dense evaluation over a large grid, same math.
        let hits: Vec<(f64, f64)> = (0..10)
            .map(|i| {
                let t = i as f64;
                (0.003 * (t * 0.7).sin(), 0.004 * (t * 1.3).cos())
            })
            .collect();
        let sigmas = vec![0.008; hits.len()];
        let pitch_um = 10.0;
        let k = 31usize;
        let kernel = splat_gaussian(&hits, &sigmas, pitch_um, k, (0.0, 0.0)).unwrap();

        let pitch_mm = pitch_um * 1e-3;
        let (mut sx, mut sy, mut se) = (0.0f64, 0.0, 0.0);
        for a in -40i64..=40 {
            for b in -40i64..=40 {
                let y = a as f64 * pitch_mm;
                let x = b as f64 * pitch_mm;
                let mut e = 0.0;
                for (&(hx, hy), &s) in hits.iter().zip(&sigmas) {
                    let r2 = (x - hx).powi(2) + (y - hy).powi(2);
                    if r2 <= 9.0 * s * s {
                        e += (-r2 / (2.0 * s * s)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * s);
                    }
                }
                sx += e * x;
                sy += e * y;
                se += e;
            }
        }
        let dense_dx = sx / se / pitch_mm;
        let dense_dy = sy / se / pitch_mm;
        // The window loses a little tail energy, so allow a loose match.
        assert!((kernel.center_offset.0 - dense_dx).abs() < 0.02, "dx");
        assert!((kernel.center_offset.1 - dense_dy).abs() < 0.02, "dy");
        assert!(kernel.clipped_fraction < 0.05);
    }

    #[test]
    fn on_axis_kernel_has_no_offset() {
        let lens = singlet(2.0);
        let sampling = sample_pupil(lens.aperture_radius_mm, 256).unwrap();
        let kernel = trace_field_psf(&lens, (0.0, 0.0), D_LINE_UM, &sampling, 11.43, 25).unwrap();
        assert!((kernel.sum() - 1.0).abs() < 1e-6);
        assert!(kernel.center_offset.0.abs() < 1e-6);
        assert!(kernel.center_offset.1.abs() < 1e-6);
    }

    #[test]
    fn tiny_aperture_collapses_to_stigmatic_spot() {
        let lens = singlet(0.05);
        let sampling = sample_pupil(lens.aperture_radius_mm, 256).unwrap();
        let theta = 2.0f64.to_radians();
        let dir = field_direction(theta, 0.0);
        let hits: Vec<(f64, f64)> = sampling
            .points
            .iter()
            .filter_map(|&(px, py)| {
                match trace_to_image(&lens, dir, (px, py), D_LINE_UM).unwrap() {
                    RayOutcome::Hit { x, y } => Some((x, y)),
                    RayOutcome::Dead => None,
                }
            })
            .collect();
        let rms_um = rms_spot_radius(&hits).unwrap();
        assert!(rms_um < 11.43, "stigmatic limit: rms {rms_um} µm exceeds one pixel");
    }

    #[test]
    fn ray_count_convergence() {
        let lens = singlet(2.5);
        let theta = 8.0f64.to_radians();
        let mut kernels = Vec::new();
        for rays in [1024usize, 4096] {
            let sampling = sample_pupil(lens.aperture_radius_mm, rays).unwrap();
            kernels.push(
                trace_field_psf(&lens, (theta, 0.0), D_LINE_UM, &sampling, 11.43, 25).unwrap(),
            );
        }
        let d = kernels[0].l1_diff(&kernels[1]);
        assert!(d < 0.02, "L1 difference {d} between 1024 and 4096 rays");
    }

    #[test]
    fn equal_field_radius_kernels_are_rotations() {
        let lens = singlet(2.5);
        let sampling = sample_pupil(lens.aperture_radius_mm, 1024).unwrap();
        let theta = 10.0f64.to_radians();
        let kx = trace_field_psf(&lens, (theta, 0.0), D_LINE_UM, &sampling, 11.43, 25).unwrap();
        let ky = trace_field_psf(&lens, (0.0, theta), D_LINE_UM, &sampling, 11.43, 25).unwrap();
        let d = kx.rotated_quarter_turn().l1_diff(&ky);
        assert!(d < 0.03, "rotated L1 difference {d}");
    }

    #[test]
    fn doubling_aperture_never_sharpens_axial_spot() {
        let lens = singlet(1.0);
        let mut last = 0.0;
        for aper in [1.0, 2.0, 4.0] {
            let mut l = lens.clone();
            l.aperture_radius_mm = aper;
            let sampling = sample_pupil(aper, 1024).unwrap();
            let hits: Vec<(f64, f64)> = sampling
                .points
                .iter()
                .filter_map(|&(px, py)| {
                    match trace_to_image(&l, [0.0, 0.0, 1.0], (px, py), D_LINE_UM).unwrap() {
                        RayOutcome::Hit { x, y } => Some((x, y)),
                        RayOutcome::Dead => None,
                    }
                })
                .collect();
            let rms = rms_spot_radius(&hits).unwrap();
            assert!(rms >= last, "rms fell from {last} to {rms} at aperture {aper}");
            last = rms;
        }
    }

    #[test]
    fn grid_shapes_follow_patch_size() {
        let lens = singlet(2.0);
        let params = PsfBuildParams {
            patch_size_px: 16,
            rays_per_bundle: 64,
            kernel_size_px: 9,
            ..Default::default()
        };
        let grid = build_psf_grid(&lens, (64, 96), &params).unwrap();
        assert_eq!((grid.grid_h, grid.grid_w), (4, 6));
        assert_eq!(grid.kernels.len(), 4 * 6 * 3);
        for k in &grid.kernels {
            assert!((k.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_field_grid_repeats_one_kernel() {
        let lens = singlet(2.0);
        let params = PsfBuildParams {
            patch_size_px: 16,
            rays_per_bundle: 64,
            kernel_size_px: 9,
            uniform_field: true,
            ..Default::default()
        };
        let grid = build_psf_grid(&lens, (48, 48), &params).unwrap();
        let first = grid.kernel(0, 0, 0);
        for gi in 0..grid.grid_h {
            for gj in 0..grid.grid_w {
                assert_eq!(grid.kernel(gi, gj, 0), first);
            }
        }
        assert!(grid.out_of_field.is_empty());
    }

    #[test]
    fn out_of_field_corners_reuse_nearest_kernel() {
        let mut lens = singlet(2.0);
        // Field limit chosen so the corner patches fall outside it.
        lens.max_half_fov_deg = 2.0;
        let params = PsfBuildParams {
            patch_size_px: 16,
            rays_per_bundle: 64,
            kernel_size_px: 9,
            ..Default::default()
        };
        let grid = build_psf_grid(&lens, (640, 640), &params).unwrap();
        assert!(!grid.out_of_field.is_empty(), "expected flagged corner patches");
        let &(gi, gj) = grid.out_of_field.first().unwrap();
        // The reused kernel must be bit-identical to some in-field kernel.
        let reused = grid.kernel(gi, gj, 0);
        let found = (0..grid.grid_h)
            .flat_map(|qi| (0..grid.grid_w).map(move |qj| (qi, qj)))
            .filter(|p| !grid.out_of_field.contains(p))
            .any(|(qi, qj)| grid.kernel(qi, qj, 0) == reused);
        assert!(found);
    }

    #[test]
    fn grid_build_is_deterministic_across_thread_counts() {
        let lens = singlet(2.0);
        let params = PsfBuildParams {
            patch_size_px: 16,
            rays_per_bundle: 64,
            kernel_size_px: 9,
            ..Default::default()
        };
        let grids: Vec<PsfGrid> = [1usize, 4]
            .iter()
            .map(|&n| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .unwrap()
                    .install(|| build_psf_grid(&lens, (64, 64), &params).unwrap())
            })
            .collect();
        assert_eq!(grids[0], grids[1]);
    }

    #[test]
    fn recentering_zeroes_the_centroid() {
        let hits = [(0.02, 0.008), (0.025, 0.004)];
        let kernel = splat_gaussian(&hits, &[0.01, 0.01], 10.0, 21, (0.0, 0.0)).unwrap();
        assert!(kernel.center_offset.0.abs() > 0.5);
        let centered = kernel.recentered();
        assert!(centered.center_offset.0.abs() < 0.05);
        assert!(centered.center_offset.1.abs() < 0.05);
        assert!((centered.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_distance_pairs_fine_patches_with_containing_coarse() {
        let lens = singlet(2.0);
        let mk = |patch: usize| {
            let params = PsfBuildParams {
                patch_size_px: patch,
                rays_per_bundle: 64,
                kernel_size_px: 9,
                ..Default::default()
            };
            build_psf_grid(&lens, (64, 64), &params).unwrap()
        };
        let fine = mk(8);
        let coarse = mk(16);
        let d_self = grid_l2_distance(&fine, &fine).unwrap();
        assert!(d_self.abs() < 1e-15);
        let d = grid_l2_distance(&fine, &coarse).unwrap();
        assert!(d.is_finite() && d >= 0.0);
        assert_eq!(
            grid_l2_distance(&coarse, &fine).unwrap(),
            d,
            "distance must be symmetric in argument order"
        );
    }
}
