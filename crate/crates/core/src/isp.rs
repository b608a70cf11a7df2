//! Forward and inverse camera signal processing.
//!
//! Forward chain: optional (mosaic → shot/read noise → demosaic), then white
//! balance, color correction matrix, and gamma encoding. The inverse chain
//! unwinds gamma, CCM, and white balance to recover linear intensities.
//! Gamma is a pure power law; noise lives in the Bayer domain only and is
//! keyed per pixel by a counter-based generator, so results never depend on
//! thread count.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_buf::{BayerImage, ImageBuf, LinearImage, SrgbImage};
use crate::optics::hex_string;
use crate::rng::counter_normal;

/// Bayer color filter layout. Only RGGB is modeled: R at (0,0), G at (0,1)
/// and (1,0), B at (1,1) within each 2×2 tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BayerPattern {
    #[default]
    #[serde(rename = "RGGB")]
    Rggb,
}

/// Sensor/ISP parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IspParams {
    /// Per-channel white balance gains (g_r, g_g, g_b).
    pub wb_gains: [f64; 3],
    /// 3×3 color correction matrix, rows nominally summing to 1.
    pub ccm: [[f64; 3]; 3],
    /// Power-law gamma; encode is x^(1/γ), decode x^γ.
    pub gamma: f64,
    /// Signal-proportional noise variance coefficient.
    pub shot_gain: f64,
    /// Constant noise variance floor.
    pub read_var: f64,
    pub bayer: BayerPattern,
}

impl Default for IspParams {
    fn default() -> Self {
        // Placeholder sensor: the real camera's parameters are unpublished.
        Self {
            wb_gains: [2.0, 1.0, 1.8],
            ccm: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma: 2.2,
            shot_gain: 0.01,
            read_var: 0.0001,
            bayer: BayerPattern::Rggb,
        }
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn invert3(m: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let d = det3(m);
    if d.abs() <= 1e-6 {
        return Err(Error::Config(format!(
            "color matrix is not invertible (det = {d:.3e})"
        )));
    }
    let inv_d = 1.0 / d;
    let adj = |r1: usize, c1: usize, r2: usize, c2: usize| m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1];
    Ok([
        [adj(1, 1, 2, 2) * inv_d, -adj(0, 1, 2, 2) * inv_d, adj(0, 1, 1, 2) * inv_d],
        [-adj(1, 0, 2, 2) * inv_d, adj(0, 0, 2, 2) * inv_d, -adj(0, 0, 1, 2) * inv_d],
        [adj(1, 0, 2, 1) * inv_d, -adj(0, 0, 2, 1) * inv_d, adj(0, 0, 1, 1) * inv_d],
    ])
}

impl IspParams {
    /// Checks every invariant, including rows-sum-to-1 on the CCM. Loaded
    /// configs must pass this.
    pub fn validate(&self) -> Result<()> {
        self.validate_relaxed()?;
        for (i, row) in self.ccm.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "ccm row {i} sums to {s}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Checks invariants except the rows-sum-to-1 convention. Perturbed
    /// parameter sets scale each CCM entry independently and intentionally
    /// leave that convention behind.
    pub fn validate_relaxed(&self) -> Result<()> {
        if self.wb_gains.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config("white balance gains must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.shot_gain < 0.0 || self.read_var < 0.0 {
            return Err(Error::Config("noise variances must be non-negative".into()));
        }
        invert3(&self.ccm).map(|_| ())
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawIspFile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("ISP config: {e}")))?;
        let d = Self::default();
        let params = Self {
            wb_gains: raw.wb.unwrap_or(d.wb_gains),
            ccm: raw.ccm.unwrap_or(d.ccm),
            gamma: raw.gamma.unwrap_or(d.gamma),
            shot_gain: raw.shot_gain.unwrap_or(d.shot_gain),
            read_var: raw.read_var.unwrap_or(d.read_var),
            bayer: match raw.bayer.as_deref() {
                None | Some("RGGB") => BayerPattern::Rggb,
                Some(other) => {
                    return Err(Error::Config(format!("unsupported bayer pattern {other:?}")))
                }
            },
        };
        // Perturbed parameter files legitimately break the rows-sum-to-1
        // convention, so loading only enforces the structural invariants.
        params.validate_relaxed()?;
        Ok(params)
    }

    pub fn to_toml_string(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(
            out,
            "wb = [{:?}, {:?}, {:?}]",
            self.wb_gains[0], self.wb_gains[1], self.wb_gains[2]
        )
        .unwrap();
        writeln!(out, "ccm = [").unwrap();
        for row in &self.ccm {
            writeln!(out, "  [{:?}, {:?}, {:?}],", row[0], row[1], row[2]).unwrap();
        }
        writeln!(out, "]").unwrap();
        writeln!(out, "gamma = {:?}", self.gamma).unwrap();
        writeln!(out, "shot_gain = {:?}", self.shot_gain).unwrap();
        writeln!(out, "read_var = {:?}", self.read_var).unwrap();
        writeln!(out, "bayer = \"RGGB\"").unwrap();
        out
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Hex SHA-256 over a canonical little-endian encoding of every field.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for g in self.wb_gains {
            h.update(g.to_le_bytes());
        }
        for row in &self.ccm {
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        h.update(self.gamma.to_le_bytes());
        h.update(self.shot_gain.to_le_bytes());
        h.update(self.read_var.to_le_bytes());
        h.update([0u8]); // RGGB tag
        hex_string(&h.finalize())
    }
}

#[derive(Deserialize)]
struct RawIspFile {
    wb: Option<[f64; 3]>,
    ccm: Option<[[f64; 3]; 3]>,
    gamma: Option<f64>,
    shot_gain: Option<f64>,
    read_var: Option<f64>,
    bayer: Option<String>,
}

/// Gamma-encode a linear value: x → x^(1/γ).
pub fn gamma_encode(x: f64, gamma: f64) -> f64 {
    x.max(0.0).powf(1.0 / gamma)
}

/// Gamma-decode an encoded value: x → x^γ.
pub fn gamma_decode(x: f64, gamma: f64) -> f64 {
    x.max(0.0).powf(gamma)
}

/// Unwind the display pipeline: gamma decode, inverse CCM, inverse white
/// balance. Returns the linear image and the number of negative samples that
/// had to be clamped to zero (inverse CCMs can undershoot on saturated
/// colors).
pub fn invert_isp(srgb: &SrgbImage, params: &IspParams) -> Result<(LinearImage, usize)> {
    if srgb.channels != 3 {
        return Err(Error::Shape(format!(
            "ISP inversion expects 3 channels, got {}",
            srgb.channels
        )));
    }
    params.validate_relaxed()?;
    let inv_ccm = invert3(&params.ccm)?;
    let mut out = ImageBuf::new(srgb.height, srgb.width, 3)?;
    let mut clamped = 0usize;
    for y in 0..srgb.height {
        for x in 0..srgb.width {
            let mut v = [0.0f64; 3];
            for (ch, slot) in v.iter_mut().enumerate() {
                *slot = gamma_decode(srgb.get(y, x, ch) as f64, params.gamma);
            }
            for ch in 0..3 {
                let mut acc = 0.0;
                for (j, vj) in v.iter().enumerate() {
                    acc += inv_ccm[ch][j] * vj;
                }
                acc /= params.wb_gains[ch];
                if acc < 0.0 {
                    clamped += 1;
                    acc = 0.0;
                }
                out.set(y, x, ch, acc as f32);
            }
        }
    }
    Ok((out, clamped))
}

/// Re-apply the display pipeline: optional Bayer round trip with noise, then
/// white balance, CCM, gamma encode, and a final clamp to [0, 1].
///
/// Noise requires the Bayer domain: `noise_seed` is ignored unless
/// `with_mosaic` is set.
pub fn forward_isp(
    linear: &LinearImage,
    params: &IspParams,
    with_mosaic: bool,
    noise_seed: Option<u64>,
) -> Result<SrgbImage> {
    if linear.channels != 3 {
        return Err(Error::Shape(format!(
            "ISP expects 3 channels, got {}",
            linear.channels
        )));
    }
    params.validate_relaxed()?;
    let staged;
    let source = if with_mosaic {
        let mut raw = mosaic(linear)?;
        if noise_seed.is_some() {
            raw = add_noise(&raw, params, noise_seed.unwrap());
        }
        staged = demosaic(&raw)?;
        &staged
    } else {
        linear
    };
    let mut out = ImageBuf::new(linear.height, linear.width, 3)?;
    for y in 0..linear.height {
        for x in 0..linear.width {
            let mut v = [0.0f64; 3];
            for (ch, slot) in v.iter_mut().enumerate() {
                *slot = source.get(y, x, ch) as f64 * params.wb_gains[ch];
            }
            for ch in 0..3 {
                let mut acc = 0.0;
                for (j, vj) in v.iter().enumerate() {
                    acc += params.ccm[ch][j] * vj;
                }
                let enc = gamma_encode(acc, params.gamma).clamp(0.0, 1.0);
                out.set(y, x, ch, enc as f32);
            }
        }
    }
    Ok(out)
}

/// Sample an RGB image onto a single-plane RGGB mosaic.
pub fn mosaic(rgb: &LinearImage) -> Result<BayerImage> {
    if rgb.channels != 3 {
        return Err(Error::Shape("mosaic expects 3 channels".into()));
    }
    if rgb.height % 2 != 0 || rgb.width % 2 != 0 {
        return Err(Error::Shape(format!(
            "Bayer images need even dims, got {}x{}",
            rgb.height, rgb.width
        )));
    }
    let mut raw = ImageBuf::new(rgb.height, rgb.width, 1)?;
    for y in 0..rgb.height {
        for x in 0..rgb.width {
            let ch = match (y % 2, x % 2) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            };
            raw.set(y, x, 0, rgb.get(y, x, ch));
        }
    }
    Ok(raw)
}

/// Add per-pixel Gaussian noise with variance `shot_gain·x + read_var`,
/// clamping the result at zero. Each pixel's draw is keyed on (seed, pixel
/// index), so any traversal or thread order yields identical output.
pub fn add_noise(raw: &BayerImage, params: &IspParams, seed: u64) -> BayerImage {
    let mut out = raw.clone();
    let w = raw.width;
    for y in 0..raw.height {
        for x in 0..w {
            let v = raw.get(y, x, 0) as f64;
            let var = params.shot_gain * v.max(0.0) + params.read_var;
            if var > 0.0 {
                let eps = counter_normal(seed, (y * w + x) as u64) * var.sqrt();
                out.set(y, x, 0, (v + eps).max(0.0) as f32);
            }
        }
    }
    out
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    // Mirror about the edge pixel center: -1 → 1, n → n-2.
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Bilinear demosaic of an RGGB mosaic, reflect borders.
pub fn demosaic(bayer: &BayerImage) -> Result<LinearImage> {
    if bayer.channels != 1 {
        return Err(Error::Shape("demosaic expects a single-plane mosaic".into()));
    }
    if bayer.height % 2 != 0 || bayer.width % 2 != 0 {
        return Err(Error::Shape(format!(
            "Bayer images need even dims, got {}x{}",
            bayer.height, bayer.width
        )));
    }
    let (h, w) = (bayer.height, bayer.width);
    let at = |y: isize, x: isize| bayer.get(reflect(y, h), reflect(x, w), 0) as f64;
    let mut rgb = ImageBuf::new(h, w, 3)?;
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let horiz = (at(yi, xi - 1) + at(yi, xi + 1)) / 2.0;
            let vert = (at(yi - 1, xi) + at(yi + 1, xi)) / 2.0;
            let cross = (horiz + vert) / 2.0;
            let diag = (at(yi - 1, xi - 1) + at(yi - 1, xi + 1) + at(yi + 1, xi - 1) + at(yi + 1, xi + 1)) / 4.0;
            let own = at(yi, xi);
            let (r, g, b) = match (y % 2, x % 2) {
                (0, 0) => (own, cross, diag),
                (0, 1) => (horiz, own, vert),
                (1, 0) => (vert, own, horiz),
                _ => (diag, cross, own),
            };
            rgb.set(y, x, 0, r as f32);
            rgb.set(y, x, 1, g as f32);
            rgb.set(y, x, 2, b as f32);
        }
    }
    Ok(rgb)
}
