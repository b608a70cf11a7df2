//! Python bindings for the engine: lens prescriptions, PSF grids, the
//! degradation pipeline, the sensor chain, metrics, and the quantizer
//! kernels. Pixel and tensor payloads cross the boundary as flat lists in
//! planar (channel, row, column) order, so the module has no numpy
//! dependency; wrap the lists with `numpy.asarray(...).reshape(...)` on the
//! Python side when convenient.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use aberray::datagen::{perturb_isp, perturb_prescription};
use aberray::degrade::{simulate_aberrated, DegradeConfig};
use aberray::image_buf::{read_auto, write_auto};
use aberray::isp::{forward_isp, invert_isp};
use aberray::optics::{paraxial_trace, refract, D_LINE_UM, RGB_WAVELENGTHS_UM};
use aberray::psf::{
    build_psf_grid, grid_l2_distance, load_psf_stack, save_psf_stack, PsfBuildParams,
};
use aberray::qdmr::{self, Codebook, FeatureMap, LossWeights, DEFAULT_COMMIT_WEIGHT};
use aberray::rng;
use aberray::{metrics, ImageBuf, IspParams, LensPrescription};

/// Error mapping mirrors the process exit contract: bad parameters raise
/// ValueError, physics failures RuntimeError, file problems IOError.
fn to_py(e: aberray::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image_from_planar(height: usize, width: usize, channels: usize, data: &[f32]) -> Option<ImageBuf> {
    if data.len() != height * width * channels {
        return None;
    }
    ImageBuf::from_fn(height, width, channels, |y, x, c| data[(c * height + y) * width + x]).ok()
}

fn image_to_planar(img: &ImageBuf) -> Vec<f32> {
    let mut out = Vec::with_capacity(img.height * img.width * img.channels);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                out.push(img.get(y, x, c));
            }
        }
    }
    out
}

/// An image in float intensity, display or linear space by context.
#[pyclass(name = "Image", module = "aberray_py", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: ImageBuf,
}

#[pymethods]
impl PyImage {
    /// Build from a flat list in planar (channel, row, column) order.
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        image_from_planar(height, width, channels, &data)
            .map(|inner| Self { inner })
            .ok_or_else(|| {
                PyValueError::new_err(format!(
                    "data length {} does not match {height}x{width}x{channels}",
                    data.len()
                ))
            })
    }

    /// Read a PNG or float raster by extension.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: read_auto(&path).map_err(to_py)? })
    }

    #[pyo3(signature = (path, bit_depth = 16))]
    fn save(&self, path: PathBuf, bit_depth: u8) -> PyResult<()> {
        write_auto(&path, &self.inner, bit_depth).map_err(to_py)
    }

    /// (height, width, channels)
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height, self.inner.width, self.inner.channels)
    }

    /// Flat planar (channel, row, column) pixel list.
    fn to_list(&self) -> Vec<f32> {
        image_to_planar(&self.inner)
    }

    fn get(&self, y: usize, x: usize, channel: usize) -> PyResult<f32> {
        if y >= self.inner.height || x >= self.inner.width || channel >= self.inner.channels {
            return Err(PyValueError::new_err("pixel index out of range"));
        }
        Ok(self.inner.get(y, x, channel))
    }

    fn __repr__(&self) -> String {
        format!(
            "Image({}x{}x{})",
            self.inner.height, self.inner.width, self.inner.channels
        )
    }
}

/// A spherical-surface lens prescription.
#[pyclass(name = "Lens", module = "aberray_py", from_py_object)]
#[derive(Clone)]
struct PyLens {
    inner: LensPrescription,
}

#[pymethods]
impl PyLens {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: LensPrescription::load_toml(&path).map_err(to_py)? })
    }

    /// Effective focal length at the d-line, mm.
    #[getter]
    fn efl_mm(&self) -> PyResult<f64> {
        Ok(paraxial_trace(&self.inner, D_LINE_UM).map_err(to_py)?.efl_mm)
    }

    /// Back focal distance at the d-line, mm.
    #[getter]
    fn bfd_mm(&self) -> PyResult<f64> {
        Ok(paraxial_trace(&self.inner, D_LINE_UM).map_err(to_py)?.bfd_mm)
    }

    #[getter]
    fn max_half_fov_deg(&self) -> f64 {
        self.inner.max_half_fov_deg
    }

    #[getter]
    fn aperture_radius_mm(&self) -> f64 {
        self.inner.aperture_radius_mm
    }

    #[getter]
    fn image_distance_mm(&self) -> f64 {
        self.inner.image_distance_mm + self.inner.focus_shift_mm
    }

    /// Jitter every parameter within ±`range` (fractional), deterministically.
    fn perturbed(&self, range: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: perturb_prescription(&self.inner, range, seed).map_err(to_py)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_toml(&path).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Lens({} surfaces, half fov {}°)",
            self.inner.surfaces.len(),
            self.inner.max_half_fov_deg
        )
    }
}

/// Sensor-chain parameters: white balance, color matrix, gamma, noise model.
#[pyclass(name = "IspParams", module = "aberray_py", from_py_object)]
#[derive(Clone)]
struct PyIsp {
    inner: IspParams,
}

#[pymethods]
impl PyIsp {
    /// Nominal parameters.
    #[new]
    fn new() -> Self {
        Self { inner: IspParams::default() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: IspParams::load_toml(&path).map_err(to_py)? })
    }

    #[getter]
    fn wb_gains(&self) -> [f64; 3] {
        self.inner.wb_gains
    }

    #[getter]
    fn ccm(&self) -> [[f64; 3]; 3] {
        self.inner.ccm
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn shot_gain(&self) -> f64 {
        self.inner.shot_gain
    }

    #[getter]
    fn read_var(&self) -> f64 {
        self.inner.read_var
    }

    /// Linear RGB to display space; optionally through the mosaic and the
    /// noise model.
    #[pyo3(signature = (image, mosaic = false, noise_seed = None))]
    fn forward(&self, image: &PyImage, mosaic: bool, noise_seed: Option<u64>) -> PyResult<PyImage> {
        Ok(PyImage {
            inner: forward_isp(&image.inner, &self.inner, mosaic, noise_seed).map_err(to_py)?,
        })
    }

    /// Display space back to linear RGB; returns (image, clamped_pixel_count).
    fn invert(&self, image: &PyImage) -> PyResult<(PyImage, usize)> {
        let (img, clamped) = invert_isp(&image.inner, &self.inner).map_err(to_py)?;
        Ok((PyImage { inner: img }, clamped))
    }

    fn perturbed(&self, range: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: perturb_isp(&self.inner, range, seed).map_err(to_py)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_toml(&path).map_err(to_py)
    }
}

/// Per-patch, per-wavelength PSF kernels covering a sensor.
#[pyclass(name = "PsfGrid", module = "aberray_py", from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: aberray::PsfGrid,
}

#[pymethods]
impl PyGrid {
    /// Trace the lens over every patch of an `height`×`width` sensor.
    #[staticmethod]
    #[pyo3(signature = (
        lens, height, width,
        patch_size = 16, pixel_pitch_um = 11.43, rays = 1024, kernel_size = 25,
    ))]
    fn build(
        lens: &PyLens,
        height: usize,
        width: usize,
        patch_size: usize,
        pixel_pitch_um: f64,
        rays: usize,
        kernel_size: usize,
    ) -> PyResult<Self> {
        let params = PsfBuildParams {
            patch_size_px: patch_size,
            pixel_pitch_um,
            rays_per_bundle: rays,
            kernel_size_px: kernel_size,
            ..PsfBuildParams::default()
        };
        Ok(Self {
            inner: build_psf_grid(&lens.inner, (height, width), &params).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_psf_stack(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_psf_stack(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn grid_shape(&self) -> (usize, usize) {
        (self.inner.grid_h, self.inner.grid_w)
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.patch_size_px
    }

    #[getter]
    fn kernel_size(&self) -> usize {
        self.inner.kernel_size()
    }

    #[getter]
    fn wavelengths_um(&self) -> Vec<f64> {
        self.inner.wavelengths_um.clone()
    }

    #[getter]
    fn image_dims(&self) -> (usize, usize) {
        self.inner.image_dims
    }

    /// Patches beyond the lens field limit (they reuse in-field kernels).
    #[getter]
    fn out_of_field(&self) -> Vec<(usize, usize)> {
        self.inner.out_of_field.clone()
    }

    /// Row-major k×k weights of one kernel.
    fn kernel(&self, gi: usize, gj: usize, wavelength: usize) -> PyResult<Vec<f64>> {
        self.check_index(gi, gj, wavelength)?;
        Ok(self.inner.kernel(gi, gj, wavelength).weights.clone())
    }

    /// Centroid offset (dx, dy) of one kernel from its window center, px.
    fn kernel_center_offset(
        &self,
        gi: usize,
        gj: usize,
        wavelength: usize,
    ) -> PyResult<(f64, f64)> {
        self.check_index(gi, gj, wavelength)?;
        Ok(self.inner.kernel(gi, gj, wavelength).center_offset)
    }

    /// Mean pairwise L2 distance to another grid built for the same sensor.
    fn distance(&self, other: &PyGrid) -> PyResult<f64> {
        grid_l2_distance(&self.inner, &other.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "PsfGrid({}x{} patches, {} wavelengths, kernel {})",
            self.inner.grid_h,
            self.inner.grid_w,
            self.inner.wavelengths_um.len(),
            self.inner.kernel_size()
        )
    }
}

impl PyGrid {
    fn check_index(&self, gi: usize, gj: usize, wavelength: usize) -> PyResult<()> {
        if gi >= self.inner.grid_h
            || gj >= self.inner.grid_w
            || wavelength >= self.inner.wavelengths_um.len()
        {
            return Err(PyValueError::new_err("kernel index out of range"));
        }
        Ok(())
    }
}

/// Apply a PSF grid to an image: patch-wise convolution, optionally wrapped
/// in the sensor chain (linearize, mosaic, noise, demosaic, re-develop).
#[pyfunction]
#[pyo3(signature = (
    image, grid,
    patch_size = None, apply_isp = false, isp = None, noise_seed = None,
    centroid_shift = true,
))]
fn degrade(
    image: &PyImage,
    grid: &PyGrid,
    patch_size: Option<usize>,
    apply_isp: bool,
    isp: Option<PyIsp>,
    noise_seed: Option<u64>,
    centroid_shift: bool,
) -> PyResult<PyImage> {
    let config = DegradeConfig {
        patch_size: patch_size.unwrap_or(grid.inner.patch_size_px),
        apply_isp,
        noise_seed,
        chain_isp: isp.map(|p| p.inner),
        centroid_shift,
        ..DegradeConfig::default()
    };
    Ok(PyImage {
        inner: simulate_aberrated(&image.inner, &grid.inner, &config).map_err(to_py)?,
    })
}

/// Peak signal-to-noise ratio, dB. Identical images give infinity.
#[pyfunction]
#[pyo3(signature = (reference, test, peak = 1.0))]
fn psnr(reference: &PyImage, test: &PyImage, peak: f64) -> PyResult<f64> {
    metrics::psnr(&reference.inner, &test.inner, peak).map_err(to_py)
}

/// Mean structural similarity over valid 11×11 Gaussian windows.
#[pyfunction]
fn ssim(reference: &PyImage, test: &PyImage) -> PyResult<f64> {
    metrics::ssim(&reference.inner, &test.inner).map_err(to_py)
}

/// Refract a unit direction at a surface normal; raises RuntimeError on
/// total internal reflection.
#[pyfunction(name = "refract")]
fn py_refract(direction: [f64; 3], normal: [f64; 3], n1: f64, n2: f64) -> PyResult<[f64; 3]> {
    refract(direction, normal, n1, n2).map_err(to_py)
}

/// Nearest-codebook-entry quantization. Feature and codebook payloads are
/// flat row-major lists; returns (quantized_values, flat_indices).
#[pyfunction(name = "quantize")]
fn py_quantize(
    features: Vec<f32>,
    height: usize,
    width: usize,
    dim: usize,
    codebook: Vec<f32>,
    count: usize,
) -> PyResult<(Vec<f32>, Vec<usize>)> {
    let features = FeatureMap::new(height, width, dim, features).map_err(to_py)?;
    let codebook = Codebook::new(codebook, count, dim).map_err(to_py)?;
    let (quantized, indices) = qdmr::quantize(&features, &codebook).map_err(to_py)?;
    Ok((quantized.values, indices))
}

/// Codebook + commitment objective between a feature map and its
/// quantization.
#[pyfunction(name = "codebook_loss")]
#[pyo3(signature = (features, quantized, height, width, dim, commit_weight = DEFAULT_COMMIT_WEIGHT))]
fn py_codebook_loss(
    features: Vec<f32>,
    quantized: Vec<f32>,
    height: usize,
    width: usize,
    dim: usize,
    commit_weight: f64,
) -> PyResult<f64> {
    let features = FeatureMap::new(height, width, dim, features).map_err(to_py)?;
    let quantized = FeatureMap::new(height, width, dim, quantized).map_err(to_py)?;
    qdmr::codebook_loss(&features, &quantized, commit_weight).map_err(to_py)
}

/// Weighted total of the three adaptation objectives.
#[pyfunction]
#[pyo3(signature = (l_cac_s, l_s2t, l_fa, s = 1.0, s2t = 1.0, fa = 0.01))]
fn uda_total(l_cac_s: f64, l_s2t: f64, l_fa: f64, s: f64, s2t: f64, fa: f64) -> f64 {
    let weights = LossWeights { s, s2t, fa, ..LossWeights::default() };
    qdmr::uda_total(l_cac_s, l_s2t, l_fa, &weights)
}

/// Deterministic sub-stream seed from a root seed and a purpose label.
#[pyfunction]
fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    rng::derive_seed(root, label, index)
}

#[pymodule]
fn aberray_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyLens>()?;
    m.add_class::<PyIsp>()?;
    m.add_class::<PyGrid>()?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(py_refract, m)?)?;
    m.add_function(wrap_pyfunction!(py_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(py_codebook_loss, m)?)?;
    m.add_function(wrap_pyfunction!(uda_total, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add("DEFAULT_COMMIT_WEIGHT", DEFAULT_COMMIT_WEIGHT)?;
    m.add("RGB_WAVELENGTHS_UM", RGB_WAVELENGTHS_UM)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::{image_from_planar, image_to_planar};

    #[test]
    fn planar_layout_round_trips() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 / 10.0).collect();
        let img = image_from_planar(3, 4, 2, &data).unwrap();
        assert_eq!(img.get(1, 2, 1), data[(1 * 3 + 1) * 4 + 2]);
        assert_eq!(image_to_planar(&img), data);
        assert!(image_from_planar(3, 4, 2, &data[1..]).is_none());
    }
}
