//! Spatially variant degradation: patch-wise convolution of a scene image
//! with a PSF grid, and the full aberrated-capture chain around it.
//!
//! The image is split into non-overlapping patches; each patch is convolved
//! with its own per-channel kernel against the reflect-padded input, so the
//! blur varies across the field while output pixels stay independent of each
//! other. Kernels are used as stored — their centroid offsets double as the
//! geometric distortion shift — unless recentering is requested.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::{ImageBuf, LinearImage, SrgbImage};
use crate::isp::{forward_isp, invert_isp, IspParams};
use crate::psf::{PsfGrid, PsfKernel};

/// Border policy for convolution windows that extend past the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Mirror about the edge pixel without repeating it.
    #[default]
    Reflect,
}

/// Settings for [`simulate_aberrated`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeConfig {
    /// Patch edge length in pixels; must be a power of two. 8 and 16 are the
    /// standard sizes.
    pub patch_size: usize,
    pub padding: Padding,
    /// Run the sensor chain: linearize, convolve, mosaic, noise, demosaic,
    /// re-develop. When false the convolution runs directly on the input.
    pub apply_isp: bool,
    /// Seed for sensor noise; no noise is injected when absent.
    pub noise_seed: Option<u64>,
    /// Sensor-chain parameters; nominal defaults when absent.
    pub chain_isp: Option<IspParams>,
    /// Keep each kernel's centroid offset as a geometric shift. Disabling
    /// recenters every kernel before convolving, removing distortion and
    /// lateral color displacement while keeping the blur shape.
    pub centroid_shift: bool,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            padding: Padding::Reflect,
            apply_isp: false,
            noise_seed: None,
            chain_isp: None,
            centroid_shift: true,
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch size must be a power of two, got {}",
                self.patch_size
            )));
        }
        if let Some(p) = &self.chain_isp {
            p.validate_relaxed()?;
        }
        Ok(())
    }
}

/// Fold an out-of-range index back into [0, n) by mirroring about the edge
/// pixels (−1 → 1, n → n−2), repeatedly for deep overhangs.
fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Reflect-pad one channel plane by `pad` on every side, widened to f64.
fn padded_plane(img: &ImageBuf, ch: usize, pad: usize) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let wp = w + 2 * pad;
    let src = img.plane(ch);
    let mut out = vec![0.0f64; (h + 2 * pad) * wp];
    for (y, dst) in out.chunks_exact_mut(wp).enumerate() {
        let sy = reflect_index(y as isize - pad as isize, h);
        let row = &src[sy * w..(sy + 1) * w];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = row[reflect_index(x as isize - pad as isize, w)] as f64;
        }
    }
    out
}

/// Kernel weights flipped in both axes, so the convolution inner loop reads
/// the padded input in row order.
fn flipped_weights(kern: &PsfKernel, recenter: bool) -> Vec<f64> {
    let k = kern.size;
    let recentered;
    let w = if recenter {
        recentered = kern.recentered();
        &recentered.weights
    } else {
        &kern.weights
    };
    let mut out = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = w[(k - 1 - i) * k + (k - 1 - j)];
        }
    }
    out
}

/// Convolve each patch of `image` with its kernel from `grid`, per channel.
///
/// Output dimensions equal input dimensions; borders (both image borders and
/// windows reaching into neighboring patches) read from the reflect-padded
/// input, so patches tile the output with no blending. Accumulation is f64
/// in a fixed order, making the result independent of thread count.
pub fn convolve_patchwise(
    image: &LinearImage,
    grid: &PsfGrid,
    patch_size: usize,
    padding: Padding,
) -> Result<LinearImage> {
    convolve_patchwise_impl(image, grid, patch_size, padding, false)
}

fn convolve_patchwise_impl(
    image: &LinearImage,
    grid: &PsfGrid,
    patch_size: usize,
    _padding: Padding,
    recenter: bool,
) -> Result<LinearImage> {
    let (h, w, ch) = (image.height, image.width, image.channels);
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    if grid.patch_size_px != patch_size {
        return Err(Error::Shape(format!(
            "grid was built for patch size {}, requested {}",
            grid.patch_size_px, patch_size
        )));
    }
    if ch != grid.n_wavelengths() {
        return Err(Error::Shape(format!(
            "image has {} channels but grid has {} wavelengths",
            ch,
            grid.n_wavelengths()
        )));
    }
    let bands = h.div_ceil(patch_size);
    let cols = w.div_ceil(patch_size);
    if grid.grid_h < bands || grid.grid_w < cols {
        return Err(Error::Shape(format!(
            "grid {}x{} patches cannot cover a {}x{} image at patch size {}",
            grid.grid_h, grid.grid_w, h, w, patch_size
        )));
    }
    let k = match grid.kernels.first() {
        Some(kern) if kern.size % 2 == 1 => kern.size,
        Some(kern) => {
            return Err(Error::Shape(format!(
                "kernel size must be odd, got {}",
                kern.size
            )))
        }
        None => return Err(Error::Shape("grid has no kernels".into())),
    };
    let pad = (k - 1) / 2;
    let wp = w + 2 * pad;

    let mut out = ImageBuf::new(h, w, ch)?;
    for c in 0..ch {
        let padded = padded_plane(image, c, pad);
        out.plane_mut(c)
            .par_chunks_mut(patch_size * w)
            .enumerate()
            .for_each(|(gi, band)| {
                let band_h = band.len() / w;
                let mut scratch = vec![0.0f64; patch_size];
                for gj in 0..cols {
                    let x0 = gj * patch_size;
                    let x1 = (x0 + patch_size).min(w);
                    let px = x1 - x0;
                    let kflip = flipped_weights(grid.kernel(gi, gj, c), recenter);
                    for yy in 0..band_h {
                        let y = gi * patch_size + yy;
                        let acc = &mut scratch[..px];
                        acc.fill(0.0);
                        // Sweep kernel taps over the contiguous row segment;
                        // every output pixel sums its taps in the same fixed
                        // (i, j) order regardless of patch or thread layout.
                        for i in 0..k {
                            let prow = &padded[(y + i) * wp + x0..(y + i) * wp + x0 + px + k - 1];
                            let krow = &kflip[i * k..i * k + k];
                            for (j, &wgt) in krow.iter().enumerate() {
                                for (a, &p) in acc.iter_mut().zip(&prow[j..j + px]) {
                                    *a += wgt * p;
                                }
                            }
                        }
                        for (o, &a) in band[yy * w + x0..yy * w + x1].iter_mut().zip(&*acc) {
                            *o = a as f32;
                        }
                    }
                }
            });
    }
    Ok(out)
}

/// Produce the degraded counterpart of a clean image.
///
/// With `apply_isp` the chain is: linearize through the inverse sensor
/// pipeline, convolve patch-wise in linear intensity, mosaic to a Bayer raw,
/// inject noise (when seeded), demosaic, and re-develop through white
/// balance, color correction, and gamma. Without it the convolution runs
/// directly on the input values.
pub fn simulate_aberrated(
    gt: &SrgbImage,
    grid: &PsfGrid,
    config: &DegradeConfig,
) -> Result<SrgbImage> {
    config.validate()?;
    let recenter = !config.centroid_shift;
    if config.apply_isp {
        let nominal;
        let params = match &config.chain_isp {
            Some(p) => p,
            None => {
                nominal = IspParams::default();
                &nominal
            }
        };
        let (lin, _clamped) = invert_isp(gt, params)?;
        let conv = convolve_patchwise_impl(&lin, grid, config.patch_size, config.padding, recenter)?;
        forward_isp(&conv, params, true, config.noise_seed)
    } else {
        convolve_patchwise_impl(gt, grid, config.patch_size, config.padding, recenter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::RGB_WAVELENGTHS_UM;
    use proptest::prelude::*;

    fn delta_kernel(k: usize) -> PsfKernel {
        let mut weights = vec![0.0; k * k];
        weights[(k / 2) * k + k / 2] = 1.0;
        PsfKernel {
            size: k,
            weights,
            pixel_pitch_um: 10.0,
            center_offset: (0.0, 0.0),
            clipped_fraction: 0.0,
        }
    }

    fn gaussian_kernel(k: usize, sigma: f64) -> PsfKernel {
        let c = (k as f64 - 1.0) / 2.0;
        let mut weights = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let (dy, dx) = (i as f64 - c, j as f64 - c);
                weights[i * k + j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        PsfKernel {
            size: k,
            weights,
            pixel_pitch_um: 10.0,
            center_offset: (0.0, 0.0),
            clipped_fraction: 0.0,
        }
    }

    /// Deterministic normalized kernel that differs per (patch, channel).
    fn scrambled_kernel(k: usize, salt: u64) -> PsfKernel {
        let mut state = salt.wrapping_mul(0x9E3779B97F4A7C15) ^ 0xD1B54A32D192ED03;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut weights: Vec<f64> = (0..k * k).map(|_| next()).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let mut kern = PsfKernel {
            size: k,
            weights,
            pixel_pitch_um: 10.0,
            center_offset: (0.0, 0.0),
            clipped_fraction: 0.0,
        };
        kern.center_offset = kern.centroid_px();
        kern
    }

    fn uniform_grid(kern: &PsfKernel, gh: usize, gw: usize, patch: usize, n_wl: usize) -> PsfGrid {
        PsfGrid {
            kernels: vec![kern.clone(); gh * gw * n_wl],
            grid_h: gh,
            grid_w: gw,
            patch_size_px: patch,
            image_dims: (gh * patch, gw * patch),
            pixel_pitch_um: kern.pixel_pitch_um,
            wavelengths_um: RGB_WAVELENGTHS_UM[..n_wl].to_vec(),
            out_of_field: Vec::new(),
        }
    }

    fn varied_grid(gh: usize, gw: usize, patch: usize, n_wl: usize, k: usize) -> PsfGrid {
        let kernels = (0..gh * gw * n_wl)
            .map(|i| scrambled_kernel(k, i as u64 + 1))
            .collect();
        PsfGrid {
            kernels,
            grid_h: gh,
            grid_w: gw,
            patch_size_px: patch,
            image_dims: (gh * patch, gw * patch),
            pixel_pitch_um: 10.0,
            wavelengths_um: RGB_WAVELENGTHS_UM[..n_wl].to_vec(),
            out_of_field: Vec::new(),
        }
    }

    fn test_image(h: usize, w: usize, c: usize) -> ImageBuf {
        ImageBuf::from_fn(h, w, c, |y, x, ch| {
            0.05 + 0.9 * (((y * 31 + x * 17 + ch * 53) % 97) as f32 / 96.0)
        })
        .unwrap()
    }

    /// Whole-image single-kernel convolution with the same padding, used as
    /// an oracle for spatially uniform grids.
    fn dense_convolve(img: &ImageBuf, kern: &PsfKernel) -> ImageBuf {
        let (h, w) = (img.height, img.width);
        let k = kern.size;
        let pad = (k - 1) / 2;
        let wp = w + 2 * pad;
        let mut out = ImageBuf::new(h, w, img.channels).unwrap();
        for c in 0..img.channels {
            let padded = padded_plane(img, c, pad);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for i in 0..k {
                        for j in 0..k {
                            acc += kern.weight(k - 1 - i, k - 1 - j)
                                * padded[(y + i) * wp + x + j];
                        }
                    }
                    out.set(y, x, c, acc as f32);
                }
            }
        }
        out
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(0, 5), 0);
        assert_eq!(reflect_index(4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        // Deep overhang folds repeatedly instead of going out of range.
        assert_eq!(reflect_index(12, 8), 2);
        assert_eq!(reflect_index(-9, 4), 3);
        assert_eq!(reflect_index(7, 1), 0);
    }

    #[test]
    fn delta_kernels_give_identity_bit_exact() {
        let img = test_image(40, 56, 3);
        let grid = uniform_grid(&delta_kernel(25), 5, 7, 8, 3);
        let out = convolve_patchwise(&img, &grid, 8, Padding::Reflect).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn uniform_grid_matches_dense_convolution() {
        let img = test_image(32, 48, 3);
        let kern = gaussian_kernel(9, 1.5);
        let grid = uniform_grid(&kern, 2, 3, 16, 3);
        let patchwise = convolve_patchwise(&img, &grid, 16, Padding::Reflect).unwrap();
        let dense = dense_convolve(&img, &kern);
        assert!(patchwise.max_abs_diff(&dense) <= 1e-6);
    }

    #[test]
    fn constant_input_stays_constant() {
        let img = ImageBuf::constant(24, 40, 3, 0.37).unwrap();
        let grid = varied_grid(3, 5, 8, 3, 7);
        let out = convolve_patchwise(&img, &grid, 8, Padding::Reflect).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() <= 1e-6);
        }
    }

    #[test]
    fn convolution_is_linear() {
        let a = test_image(24, 24, 3);
        let b = ImageBuf::from_fn(24, 24, 3, |y, x, c| {
            (((y * 7 + x * 13 + c * 29) % 53) as f32 / 52.0).powi(2)
        })
        .unwrap();
        let grid = varied_grid(3, 3, 8, 3, 9);
        let mixed = ImageBuf::from_fn(24, 24, 3, |y, x, c| {
            2.0 * a.get(y, x, c) + 0.5 * b.get(y, x, c)
        })
        .unwrap();
        let conv_mixed = convolve_patchwise(&mixed, &grid, 8, Padding::Reflect).unwrap();
        let conv_a = convolve_patchwise(&a, &grid, 8, Padding::Reflect).unwrap();
        let conv_b = convolve_patchwise(&b, &grid, 8, Padding::Reflect).unwrap();
        for i in 0..conv_mixed.data().len() {
            let expect = 2.0 * conv_a.data()[i] + 0.5 * conv_b.data()[i];
            assert!((conv_mixed.data()[i] - expect).abs() <= 1e-6);
        }
    }

    #[test]
    fn centroid_offset_shifts_content() {
        let img = test_image(16, 16, 1);
        let k = 9;
        let mut kern = delta_kernel(k);
        kern.weights[(k / 2) * k + k / 2] = 0.0;
        kern.weights[(k / 2) * k + k / 2 + 1] = 1.0;
        kern.center_offset = kern.centroid_px();
        assert_eq!(kern.center_offset, (1.0, 0.0));
        let grid = uniform_grid(&kern, 1, 1, 16, 1);

        let shifted = convolve_patchwise(&img, &grid, 16, Padding::Reflect).unwrap();
        for y in 0..16 {
            for x in 1..16 {
                assert_eq!(shifted.get(y, x, 0), img.get(y, x - 1, 0));
            }
        }

        // Recentering removes the shift: the integer-offset delta becomes a
        // centered delta, so the output equals the input again.
        let cfg = DegradeConfig {
            patch_size: 16,
            centroid_shift: false,
            ..DegradeConfig::default()
        };
        let recentered = simulate_aberrated(&img, &grid, &cfg).unwrap();
        assert_eq!(recentered.data(), img.data());
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let img = test_image(16, 16, 3);
        let grid = uniform_grid(&delta_kernel(5), 2, 2, 8, 3);
        assert!(matches!(
            convolve_patchwise(&img, &grid, 16, Padding::Reflect),
            Err(Error::Shape(_))
        ));
        let mono = test_image(16, 16, 1);
        assert!(matches!(
            convolve_patchwise(&mono, &grid, 8, Padding::Reflect),
            Err(Error::Shape(_))
        ));
        let big = test_image(40, 16, 3);
        assert!(matches!(
            convolve_patchwise(&big, &grid, 8, Padding::Reflect),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn no_isp_mode_equals_direct_convolution() {
        let img = test_image(32, 32, 3);
        let grid = varied_grid(2, 2, 16, 3, 7);
        let cfg = DegradeConfig::default();
        let via_sim = simulate_aberrated(&img, &grid, &cfg).unwrap();
        let direct = convolve_patchwise(&img, &grid, 16, Padding::Reflect).unwrap();
        assert_eq!(via_sim.data(), direct.data());
    }

    #[test]
    fn sensor_chain_differs_from_plain_convolution() {
        let img = test_image(32, 32, 3);
        let grid = uniform_grid(&gaussian_kernel(7, 1.2), 4, 4, 8, 3);
        let plain = simulate_aberrated(&img, &grid, &DegradeConfig {
            patch_size: 8,
            ..DegradeConfig::default()
        })
        .unwrap();
        let chained = simulate_aberrated(&img, &grid, &DegradeConfig {
            patch_size: 8,
            apply_isp: true,
            noise_seed: Some(7),
            ..DegradeConfig::default()
        })
        .unwrap();
        let mean_diff: f64 = plain
            .data()
            .iter()
            .zip(chained.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / plain.data().len() as f64;
        assert!(mean_diff > 0.0);
    }

    #[test]
    fn output_is_independent_of_thread_count() {
        let img = test_image(48, 64, 3);
        let grid = varied_grid(6, 8, 8, 3, 9);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| convolve_patchwise(&img, &grid, 8, Padding::Reflect).unwrap())
        };
        assert_eq!(run(1).data(), run(4).data());
    }

    #[test]
    fn config_validation_rejects_bad_patch_sizes() {
        for bad in [0usize, 3, 12] {
            let cfg = DegradeConfig {
                patch_size: bad,
                ..DegradeConfig::default()
            };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
        DegradeConfig::default().validate().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_linearity_and_constants(
            seed in 0u64..1000,
            alpha in 0.1f32..3.0,
            level in 0.01f32..0.9,
        ) {
            let grid = varied_grid(2, 2, 4, 1, 5);
            let img = ImageBuf::from_fn(8, 8, 1, |y, x, _| {
                (((y as u64 * 131 + x as u64 * 37 + seed) % 89) as f32) / 89.0
            }).unwrap();
            let scaled_in = ImageBuf::from_fn(8, 8, 1, |y, x, c| alpha * img.get(y, x, c)).unwrap();
            let conv = convolve_patchwise(&img, &grid, 4, Padding::Reflect).unwrap();
            let conv_scaled = convolve_patchwise(&scaled_in, &grid, 4, Padding::Reflect).unwrap();
            for i in 0..conv.data().len() {
                prop_assert!((conv_scaled.data()[i] - alpha * conv.data()[i]).abs() <= 1e-5);
            }

            let flat = ImageBuf::constant(8, 8, 1, level).unwrap();
            let conv_flat = convolve_patchwise(&flat, &grid, 4, Padding::Reflect).unwrap();
            for &v in conv_flat.data() {
                prop_assert!((v - level).abs() <= 1e-6);
            }
        }
    }
}
