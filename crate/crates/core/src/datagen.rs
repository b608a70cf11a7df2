//! Two-domain dataset generation: a clean "source" rendering of the nominal
//! system and a "simulated target" rendering with seeded manufacturing and
//! processing deviations, plus provenance manifests.
//!
//! The target domain jitters lens parameters (curvature, spacing, index,
//! Abbe number) and ISP parameters (white balance, color matrix, gamma) by
//! independent multiplicative uniform factors, optionally defocuses, halves
//! the convolution patch size, and injects sensor noise. One perturbed lens
//! serves the whole dataset (one manufactured unit) unless per-image
//! perturbation is requested.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{simulate_aberrated, DegradeConfig, Padding};
use crate::error::{Error, Result};
use crate::image_buf::{read_auto, read_dims, write_png};
use crate::isp::IspParams;
use crate::optics::{paraxial_trace, LensPrescription, D_LINE_UM};
use crate::psf::{build_psf_grid, PsfBuildParams, PsfGrid};
use crate::rng::derive_seed;

pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");
const PERTURB_ATTEMPTS: u64 = 8;

/// Domain-gap perturbation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    /// Multiplicative jitter range for lens parameters (±fraction).
    pub lens_range: f64,
    /// Multiplicative jitter range for ISP parameters (±fraction).
    pub isp_range: f64,
    /// Convolution patch size of the simulated-target domain, px.
    pub patch_size_target: usize,
    /// Convolution patch size of the source domain, px.
    pub patch_size_source: usize,
    /// Signed defocus applied to the simulated-target lens, mm.
    pub focus_shift_mm: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            lens_range: 0.05,
            isp_range: 0.02,
            patch_size_target: 8,
            patch_size_source: 16,
            focus_shift_mm: 0.0,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lens_range", self.lens_range), ("isp_range", self.isp_range)] {
            if !v.is_finite() || !(0.0..=0.2).contains(&v) {
                return Err(Error::Config(format!(
                    "{name} must lie in [0, 0.2], got {v}"
                )));
            }
        }
        for (name, p) in [
            ("patch_size_target", self.patch_size_target),
            ("patch_size_source", self.patch_size_source),
        ] {
            if p == 0 || !p.is_power_of_two() {
                return Err(Error::Config(format!(
                    "{name} must be a power of two, got {p}"
                )));
            }
        }
        if !self.focus_shift_mm.is_finite() {
            return Err(Error::Config("focus_shift_mm must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetMode {
    #[serde(rename = "syn")]
    Syn,
    #[serde(rename = "real-sim")]
    RealSim,
}

/// Ray/PSF synthesis knobs shared by both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsfSettings {
    pub pixel_pitch_um: f64,
    pub kernel_size_px: usize,
    pub rays_per_bundle: usize,
}

impl Default for PsfSettings {
    fn default() -> Self {
        let d = PsfBuildParams::default();
        Self {
            pixel_pitch_um: d.pixel_pitch_um,
            kernel_size_px: d.kernel_size_px,
            rays_per_bundle: d.rays_per_bundle,
        }
    }
}

/// Full dataset-generation configuration, loadable from TOML. Relative
/// paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub gt_dir: PathBuf,
    pub output_dir: PathBuf,
    pub mode: DatasetMode,
    pub lens_file: PathBuf,
    /// ISP parameter file; nominal defaults when absent.
    pub isp_file: Option<PathBuf>,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    /// Fraction of the corpus assigned to training in the simulated-target
    /// mode.
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    /// Draw a fresh perturbed lens per image instead of one per dataset.
    #[serde(default)]
    pub per_image_perturbation: bool,
    #[serde(default)]
    pub psf: PsfSettings,
}

fn default_train_ratio() -> f64 {
    0.889
}

impl DatasetConfig {
    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config: DatasetConfig =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            config.resolve_relative(base);
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        anchor(&mut self.gt_dir);
        anchor(&mut self.output_dir);
        anchor(&mut self.lens_file);
        if let Some(p) = &mut self.isp_file {
            anchor(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.perturbation.validate()?;
        if !self.train_ratio.is_finite() || !(0.0..=1.0).contains(&self.train_ratio) {
            return Err(Error::Config(format!(
                "train_ratio must lie in [0, 1], got {}",
                self.train_ratio
            )));
        }
        if self.psf.kernel_size_px % 2 == 0 || self.psf.kernel_size_px == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.psf.kernel_size_px
            )));
        }
        if !(self.psf.pixel_pitch_um > 0.0) || self.psf.rays_per_bundle == 0 {
            return Err(Error::Config("PSF settings must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the JSONL manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    /// "syn", "real-sim-train", or "real-sim-test".
    pub domain: String,
    pub gt_path: String,
    /// Relative to the manifest's directory.
    pub aberrated_path: String,
    pub lens_hash: String,
    pub isp_hash: Option<String>,
    pub seed: u64,
    pub patch_size: usize,
    pub pipeline_version: String,
}

fn uniform_factor<R: Rng>(rng: &mut R, range: f64) -> f64 {
    1.0 + rng.random_range(-range..=range)
}

fn perturbed_candidate(
    p: &LensPrescription,
    range: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LensPrescription> {
    let mut out = p.clone();
    // Fixed draw order: per surface, curvature, spacing, then (for glass)
    // d-line index and Abbe number.
    for s in &mut out.surfaces {
        s.curvature *= uniform_factor(rng, range);
        s.thickness_after *= uniform_factor(rng, range);
        if let Some(mat) = &mut s.material_after {
            let n_d = mat.n_d() * uniform_factor(rng, range);
            let abbe = mat.abbe() * uniform_factor(rng, range);
            *mat = crate::optics::MaterialDispersion::from_nd_abbe(n_d, abbe)?;
        }
    }
    Ok(out)
}

/// Jitter lens parameters by independent uniform factors in [1−range,
/// 1+range]. Field of view, aperture, and image distance stay fixed. The
/// result must still focus (paraxial trace at the d-line); up to 8 reseeded
/// attempts are made before giving up.
pub fn perturb_prescription(
    p: &LensPrescription,
    range: f64,
    seed: u64,
) -> Result<LensPrescription> {
    if !range.is_finite() || range < 0.0 {
        return Err(Error::Config(format!(
            "perturbation range must be ≥ 0, got {range}"
        )));
    }
    p.validate()?;
    if range == 0.0 {
        return Ok(p.clone());
    }
    let mut last_err = None;
    for attempt in 0..PERTURB_ATTEMPTS {
        let attempt_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, "lens-perturb-retry", attempt)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed);
        let outcome = perturbed_candidate(p, range, &mut rng)
            .and_then(|c| c.validate().map(|_| c))
            .and_then(|c| paraxial_trace(&c, D_LINE_UM).map(|_| c));
        match outcome {
            Ok(c) => return Ok(c),
            Err(e) => last_err = Some(e),
        }
    }
    Err(Error::Perturbation(format!(
        "no focusing lens within ±{:.1}% after {PERTURB_ATTEMPTS} attempts (last error: {})",
        range * 100.0,
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Jitter white-balance gains, color-matrix entries, and gamma by
/// independent uniform factors in [1−range, 1+range]. Noise parameters and
/// the mosaic layout stay fixed.
pub fn perturb_isp(params: &IspParams, range: f64, seed: u64) -> Result<IspParams> {
    if !range.is_finite() || range < 0.0 {
        return Err(Error::Config(format!(
            "perturbation range must be ≥ 0, got {range}"
        )));
    }
    params.validate_relaxed()?;
    if range == 0.0 {
        return Ok(params.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    for g in &mut out.wb_gains {
        *g *= uniform_factor(&mut rng, range);
    }
    for row in &mut out.ccm {
        for v in row {
            *v *= uniform_factor(&mut rng, range);
        }
    }
    out.gamma *= uniform_factor(&mut rng, range);
    out.validate_relaxed()?;
    Ok(out)
}

/// Deterministic train/test counts: round(n·ratio) training images, with at
/// least one test image whenever the corpus has two or more.
pub fn split_counts(n: usize, train_ratio: f64) -> (usize, usize) {
    let mut n_train = ((n as f64) * train_ratio).round() as usize;
    n_train = n_train.min(n);
    let mut n_test = n - n_train;
    if n_test == 0 && n > 1 {
        n_test = 1;
        n_train = n - 1;
    }
    (n_train, n_test)
}

fn list_gt_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("pfp")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no ground-truth images (.png/.pfp) in {}", dir.display()),
        )));
    }
    Ok(files)
}

/// Render the degraded counterpart of every ground-truth image and write the
/// JSONL manifest. Returns the records in id order. The same config and seed
/// always reproduce bit-identical images and manifest.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<ManifestRecord>> {
    config.validate()?;
    let nominal_lens = LensPrescription::load_toml(&config.lens_file)?;
    let gt_files = list_gt_images(&config.gt_dir)?;
    let spec = &config.perturbation;

    // Domain setup: which lens renders each image, which ISP chain applies,
    // and which domain tag each record carries.
    let patch_size;
    let shared_lens: Option<Arc<LensPrescription>>;
    let chain_isp: Option<IspParams>;
    let isp_hash: Option<String>;
    let domains: Vec<String>;
    match config.mode {
        DatasetMode::Syn => {
            patch_size = spec.patch_size_source;
            shared_lens = Some(Arc::new(nominal_lens.clone()));
            chain_isp = None;
            isp_hash = None;
            domains = vec!["syn".to_string(); gt_files.len()];
        }
        DatasetMode::RealSim => {
            patch_size = spec.patch_size_target;
            shared_lens = if config.per_image_perturbation {
                None
            } else {
                let mut lens = perturb_prescription(
                    &nominal_lens,
                    spec.lens_range,
                    derive_seed(spec.seed, "lens", 0),
                )?;
                lens.focus_shift_mm += spec.focus_shift_mm;
                Some(Arc::new(lens))
            };
            let nominal_isp = match &config.isp_file {
                Some(p) => IspParams::load_toml(p)?,
                None => IspParams::default(),
            };
            let perturbed = perturb_isp(&nominal_isp, spec.isp_range, derive_seed(spec.seed, "isp", 0))?;
            isp_hash = Some(perturbed.content_hash());
            chain_isp = Some(perturbed);

            let (n_train, _) = split_counts(gt_files.len(), config.train_ratio);
            let mut order: Vec<usize> = (0..gt_files.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "split", 0));
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut tags = vec![String::new(); gt_files.len()];
            for (rank, &idx) in order.iter().enumerate() {
                tags[idx] = if rank < n_train {
                    "real-sim-train".to_string()
                } else {
                    "real-sim-test".to_string()
                };
            }
            domains = tags;
        }
    }

    let image_lens = |idx: usize| -> Result<Arc<LensPrescription>> {
        match &shared_lens {
            Some(lens) => Ok(Arc::clone(lens)),
            None => {
                let mut lens = perturb_prescription(
                    &nominal_lens,
                    spec.lens_range,
                    derive_seed(spec.seed, "lens-image", idx as u64),
                )?;
                lens.focus_shift_mm += spec.focus_shift_mm;
                Ok(Arc::new(lens))
            }
        }
    };

    // With a shared lens, PSF grids depend only on image dimensions; build
    // one per unique size up front.
    let mut grid_cache: HashMap<(usize, usize), Arc<PsfGrid>> = HashMap::new();
    if let Some(lens) = &shared_lens {
        let mut dims: Vec<(usize, usize)> = gt_files
            .iter()
            .map(|p| read_dims(p))
            .collect::<Result<Vec<_>>>()?;
        dims.sort();
        dims.dedup();
        let params = psf_params(config, patch_size);
        for d in dims {
            grid_cache.insert(d, Arc::new(build_psf_grid(lens, d, &params)?));
        }
    }

    let images_dir = config.output_dir.join("images");
    fs::create_dir_all(&images_dir)?;

    let records: Vec<ManifestRecord> = gt_files
        .par_iter()
        .enumerate()
        .map(|(idx, gt_path)| -> Result<ManifestRecord> {
            let gt = read_auto(gt_path)?;
            let lens = image_lens(idx)?;
            let grid = match grid_cache.get(&(gt.height, gt.width)) {
                Some(g) => Arc::clone(g),
                None => Arc::new(build_psf_grid(
                    &lens,
                    (gt.height, gt.width),
                    &psf_params(config, patch_size),
                )?),
            };
            let record_seed = derive_seed(spec.seed, "image", idx as u64);
            let degrade = DegradeConfig {
                patch_size,
                padding: Padding::Reflect,
                apply_isp: chain_isp.is_some(),
                noise_seed: chain_isp
                    .as_ref()
                    .map(|_| derive_seed(record_seed, "noise", 0)),
                chain_isp: chain_isp.clone(),
                centroid_shift: true,
            };
            let aberrated = simulate_aberrated(&gt, &grid, &degrade)?;
            let rel_path = format!("images/{idx:05}.png");
            write_png(&config.output_dir.join(&rel_path), &aberrated, 16)?;
            Ok(ManifestRecord {
                id: idx,
                domain: domains[idx].clone(),
                gt_path: gt_path.display().to_string(),
                aberrated_path: rel_path,
                lens_hash: lens.content_hash(),
                isp_hash: isp_hash.clone(),
                seed: record_seed,
                patch_size,
                pipeline_version: PIPELINE_VERSION.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    write_manifest(&config.output_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

fn psf_params(config: &DatasetConfig, patch_size: usize) -> PsfBuildParams {
    PsfBuildParams {
        patch_size_px: patch_size,
        pixel_pitch_um: config.psf.pixel_pitch_um,
        kernel_size_px: config.psf.kernel_size_px,
        rays_per_bundle: config.psf.rays_per_bundle,
        ..PsfBuildParams::default()
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(records)
}
