//! Pure numeric kernels for the learning-side math: codebook quantization,
//! affine feature modulation, LSGAN/hinge adversarial losses, and the
//! composite training objectives.
//!
//! Everything here is forward-only. Gradient conventions that matter for
//! training (straight-through estimation through the quantizer, stop-gradient
//! placement in the codebook loss) are documented contracts for downstream
//! trainers, not implemented.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;

pub const DEFAULT_CODEBOOK_SIZE: usize = 1024;
pub const DEFAULT_FEATURE_DIM: usize = 512;
/// Commitment weight of the standard two-term vector-quantization loss.
pub const DEFAULT_COMMIT_WEIGHT: f64 = 0.25;

/// K×n codebook of feature prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// Row-major K×n entries.
    pub entries: Vec<f32>,
    pub count: usize,
    pub dim: usize,
}

impl Codebook {
    pub fn new(entries: Vec<f32>, count: usize, dim: usize) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "codebook needs positive dims, got {count}x{dim}"
            )));
        }
        if entries.len() != count * dim {
            return Err(Error::Shape(format!(
                "codebook data length {} does not match {count}x{dim}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook entries must be finite".into()));
        }
        Ok(Self {
            entries,
            count,
            dim,
        })
    }

    #[inline]
    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Check that no two entries coincide within `tol` in every component;
    /// duplicates make argmin ties meaningful (lowest index still wins).
    pub fn validate_distinct(&self, tol: f64) -> Result<()> {
        for a in 0..self.count {
            for b in a + 1..self.count {
                let near = self
                    .entry(a)
                    .iter()
                    .zip(self.entry(b))
                    .all(|(x, y)| (*x as f64 - *y as f64).abs() <= tol);
                if near {
                    return Err(Error::Config(format!(
                        "codebook entries {a} and {b} coincide within {tol}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// h×w×n feature tensor, position-major (the n-vector of one position is
/// contiguous).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature map needs positive dims, got {height}x{width}x{dim}"
            )));
        }
        if values.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "feature data length {} does not match {height}x{width}x{dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("feature values must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * dim);
        for y in 0..height {
            for x in 0..width {
                for c in 0..dim {
                    values.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, dim, values)
    }

    #[inline]
    pub fn position(&self, y: usize, x: usize) -> &[f32] {
        let base = (y * self.width + x) * self.dim;
        &self.values[base..base + self.dim]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.dim == other.dim
    }
}

/// One per-position linear transform (1×1-convolution semantics).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// Row-major out_dim×in_dim weights.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl LinearMap {
    pub fn new(weight: Vec<f32>, bias: Vec<f32>, out_dim: usize, in_dim: usize) -> Result<Self> {
        if weight.len() != out_dim * in_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "linear map {out_dim}x{in_dim} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            weight,
            bias,
            out_dim,
            in_dim,
        })
    }

    fn apply_into(&self, x: &[f32], out: &mut [f32]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias))
        {
            let mut acc = *b as f64;
            for (w, v) in row.iter().zip(x) {
                acc += *w as f64 * *v as f64;
            }
            *o = acc as f32;
        }
    }
}

/// Per-position scale and shift maps for affine modulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationMaps {
    pub gamma: FeatureMap,
    pub beta: FeatureMap,
}

impl ModulationMaps {
    pub fn new(gamma: FeatureMap, beta: FeatureMap) -> Result<Self> {
        if !gamma.same_shape(&beta) {
            return Err(Error::Shape(
                "gamma and beta maps must have equal shapes".into(),
            ));
        }
        Ok(Self { gamma, beta })
    }

    /// Predict (γ, β) from a quantized feature with two per-position linear
    /// maps. No nonlinearity is applied between input and outputs.
    pub fn from_mapping(
        quantized: &FeatureMap,
        gamma_map: &LinearMap,
        beta_map: &LinearMap,
    ) -> Result<Self> {
        if gamma_map.in_dim != quantized.dim || beta_map.in_dim != quantized.dim {
            return Err(Error::Shape(format!(
                "mapping expects input dim {}, got maps with {} and {}",
                quantized.dim, gamma_map.in_dim, beta_map.in_dim
            )));
        }
        if gamma_map.out_dim != beta_map.out_dim {
            return Err(Error::Shape(
                "gamma and beta maps must share an output dim".into(),
            ));
        }
        let (h, w, out_dim) = (quantized.height, quantized.width, gamma_map.out_dim);
        let mut gamma = vec![0.0f32; h * w * out_dim];
        let mut beta = vec![0.0f32; h * w * out_dim];
        for (pos, x) in quantized.values.chunks_exact(quantized.dim).enumerate() {
            gamma_map.apply_into(x, &mut gamma[pos * out_dim..(pos + 1) * out_dim]);
            beta_map.apply_into(x, &mut beta[pos * out_dim..(pos + 1) * out_dim]);
        }
        Ok(Self {
            gamma: FeatureMap::new(h, w, out_dim, gamma)?,
            beta: FeatureMap::new(h, w, out_dim, beta)?,
        })
    }
}

/// Weights of every loss term in the training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub per_vq: f64,
    pub adv_vq: f64,
    pub per_cac: f64,
    pub adv_cac: f64,
    pub s: f64,
    pub s2t: f64,
    pub t: f64,
    pub fa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            per_vq: 1.0,
            adv_vq: 0.1,
            per_cac: 1.0,
            adv_cac: 0.01,
            s: 1.0,
            s2t: 1.0,
            t: 0.1,
            fa: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("per_vq", self.per_vq),
            ("adv_vq", self.adv_vq),
            ("per_cac", self.per_cac),
            ("adv_cac", self.adv_cac),
            ("s", self.s),
            ("s2t", self.s2t),
            ("t", self.t),
            ("fa", self.fa),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A map (or batch) of scalar discriminator responses.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorField {
    pub values: Vec<f64>,
}

impl DiscriminatorField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("discriminator field must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "discriminator responses must be finite".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn uniform(value: f64, len: usize) -> Result<Self> {
        Self::new(vec![value; len])
    }

    fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// mean (x − target)²
    fn mean_sq_dev(&self, target: f64) -> f64 {
        self.values
            .iter()
            .map(|v| (v - target) * (v - target))
            .sum::<f64>()
            / self.values.len() as f64
    }

    /// mean max(0, margin − sign·x)
    fn mean_hinge(&self, sign: f64) -> f64 {
        self.values
            .iter()
            .map(|v| (1.0 - sign * v).max(0.0))
            .sum::<f64>()
            / self.values.len() as f64
    }
}

/// Nearest-codebook-entry quantization.
///
/// Per position the selected index is argmin_k ‖f − z_k‖₂, lowest index on
/// exact ties, and the output vector is the selected entry verbatim.
/// Positions are independent, so parallel evaluation is deterministic.
/// Downstream trainers treat this as straight-through: gradients copy from
/// the quantized output to the input feature.
pub fn quantize(features: &FeatureMap, codebook: &Codebook) -> Result<(FeatureMap, Vec<usize>)> {
    if features.dim != codebook.dim {
        return Err(Error::Shape(format!(
            "feature dim {} does not match codebook dim {}",
            features.dim, codebook.dim
        )));
    }
    let n = features.dim;
    let positions = features.height * features.width;
    let mut indices = vec![0usize; positions];
    let mut values = vec![0.0f32; positions * n];
    indices
        .par_iter_mut()
        .zip(values.par_chunks_mut(n))
        .zip(features.values.par_chunks(n))
        .for_each(|((idx, out), f)| {
            let k = nearest_entry(f, codebook);
            *idx = k;
            out.copy_from_slice(codebook.entry(k));
        });
    Ok((
        FeatureMap::new(features.height, features.width, n, values)?,
        indices,
    ))
}

fn nearest_entry(f: &[f32], codebook: &Codebook) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for k in 0..codebook.count {
        let mut d = 0.0f64;
        for (a, b) in f.iter().zip(codebook.entry(k)) {
            let t = *a as f64 - *b as f64;
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Two-term vector-quantization objective:
/// mean ‖q − f‖² + commit_weight · mean ‖f − q‖², means over all elements.
///
/// Forward values of the two terms coincide; they differ only in gradient
/// routing (the first updates the codebook behind a stop-gradient on f, the
/// second commits the encoder behind a stop-gradient on q).
pub fn codebook_loss(
    features: &FeatureMap,
    quantized: &FeatureMap,
    commit_weight: f64,
) -> Result<f64> {
    if !features.same_shape(quantized) {
        return Err(Error::Shape(
            "codebook loss needs matching feature shapes".into(),
        ));
    }
    let mut sum = 0.0f64;
    for (f, q) in features.values.iter().zip(&quantized.values) {
        let d = *q as f64 - *f as f64;
        sum += d * d;
    }
    let mean_sq = sum / features.values.len() as f64;
    Ok(mean_sq + commit_weight * mean_sq)
}

/// Elementwise affine modulation f^m = γ ⊙ f + β.
pub fn affine_modulate(f: &FeatureMap, maps: &ModulationMaps) -> Result<FeatureMap> {
    if !f.same_shape(&maps.gamma) {
        return Err(Error::Shape(
            "modulation maps must match the feature shape".into(),
        ));
    }
    let values = f
        .values
        .iter()
        .zip(&maps.gamma.values)
        .zip(&maps.beta.values)
        .map(|((x, g), b)| (*g as f64 * *x as f64 + *b as f64) as f32)
        .collect();
    FeatureMap::new(f.height, f.width, f.dim, values)
}

/// Generator side of the source→target LSGAN: both reconstructions should
/// read as real (target 1).
pub fn lsgan_s2t_generator(
    d_src_recon: &DiscriminatorField,
    d_tgt_recon: &DiscriminatorField,
) -> f64 {
    d_src_recon.mean_sq_dev(1.0) + d_tgt_recon.mean_sq_dev(1.0)
}

/// Discriminator side of the source→target LSGAN: reconstructions to 0,
/// real target images to 1.
pub fn lsgan_s2t_discriminator(
    d_src_recon: &DiscriminatorField,
    d_tgt_recon: &DiscriminatorField,
    d_tgt_real: &DiscriminatorField,
) -> f64 {
    d_src_recon.mean_sq_dev(0.0) + d_tgt_recon.mean_sq_dev(0.0) + d_tgt_real.mean_sq_dev(1.0)
}

/// Generator side of the feature-alignment LSGAN: both domains' restoration
/// features are pushed to the 0.5 decision boundary.
pub fn lsgan_fa_generator(
    d_src_feat: &DiscriminatorField,
    d_tgt_feat: &DiscriminatorField,
    lambda_s: f64,
    lambda_t: f64,
) -> f64 {
    lambda_s * d_src_feat.mean_sq_dev(0.5) + lambda_t * d_tgt_feat.mean_sq_dev(0.5)
}

/// Discriminator side of the feature-alignment LSGAN: target features to 0,
/// source features to 1.
pub fn lsgan_fa_discriminator(
    d_tgt_feat: &DiscriminatorField,
    d_src_feat: &DiscriminatorField,
) -> f64 {
    d_tgt_feat.mean_sq_dev(0.0) + d_src_feat.mean_sq_dev(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HingeRole {
    Generator,
    Discriminator,
}

/// Standard hinge adversarial loss.
///
/// Generator: −mean(d_fake). Discriminator: mean max(0, 1 − d_real) +
/// mean max(0, 1 + d_fake); requires the real-sample responses.
pub fn hinge_adversarial(
    d_fake: &DiscriminatorField,
    d_real: Option<&DiscriminatorField>,
    role: HingeRole,
) -> Result<f64> {
    match role {
        HingeRole::Generator => Ok(-d_fake.mean()),
        HingeRole::Discriminator => {
            let real = d_real.ok_or_else(|| {
                Error::Config("discriminator hinge loss needs real responses".into())
            })?;
            Ok(real.mean_hinge(1.0) + d_fake.mean_hinge(-1.0))
        }
    }
}

/// Reconstruction objective of codebook pretraining:
/// l1 + per_vq·perceptual + adv_vq·adversarial + codebook.
pub fn composite_vqgan_loss(
    l1: f64,
    perceptual: f64,
    adversarial: f64,
    codebook: f64,
    w: &LossWeights,
) -> f64 {
    l1 + w.per_vq * perceptual + w.adv_vq * adversarial + codebook
}

/// Restoration objective: l1 + per_cac·perceptual + adv_cac·adversarial.
pub fn composite_cac_loss(l1: f64, perceptual: f64, adversarial: f64, w: &LossWeights) -> f64 {
    l1 + w.per_cac * perceptual + w.adv_cac * adversarial
}

/// Overall domain-adaptation objective: s·L_s + s2t·L_s2t + fa·L_fa.
/// Zeroing s2t and fa recovers the source-only ablation.
pub fn uda_total(l_cac_s: f64, l_cac_s2t: f64, l_fa: f64, w: &LossWeights) -> f64 {
    w.s * l_cac_s + w.s2t * l_cac_s2t + w.fa * l_fa
}

/// Mean absolute difference between two feature maps.
pub fn l1_loss(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("L1 loss needs matching shapes".into()));
    }
    Ok(mean_abs_diff(&a.values, &b.values))
}

/// Mean absolute difference between two images.
pub fn l1_loss_images(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("L1 loss needs matching shapes".into()));
    }
    Ok(mean_abs_diff(a.data(), b.data()))
}

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
    role: String,
}

/// Write a tensor as a one-line JSON header (dtype, shape, role) followed by
/// flat little-endian f32 data.
pub fn write_tensor(path: &Path, shape: &[usize], role: &str, data: &[f32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Shape(format!(
            "tensor data length {} does not match shape {shape:?}",
            data.len()
        )));
    }
    let header = serde_json::to_string(&TensorHeader {
        dtype: "f32".into(),
        shape: shape.to_vec(),
        role: role.into(),
    })
    .map_err(|e| Error::Parse(format!("tensor header: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    for v in data {
        w.write_f32::<LittleEndian>(*v)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a tensor written by [`write_tensor`]; returns (shape, role, data).
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, String, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|_| Error::Parse("tensor file ended inside the header".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 1 << 16 {
            return Err(Error::Parse("tensor header exceeds 64 KiB".into()));
        }
    }
    let header: TensorHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Parse(format!("tensor header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Parse(format!(
            "unsupported tensor dtype {:?}",
            header.dtype
        )));
    }
    let count: usize = header.shape.iter().product();
    let mut data = vec![0.0f32; count];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| Error::Parse("tensor payload shorter than its shape".into()))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Parse("tensor payload longer than its shape".into()));
    }
    Ok((header.shape, header.role, data))
}

impl Codebook {
    pub fn save(&self, path: &Path, role: &str) -> Result<()> {
        write_tensor(path, &[self.count, self.dim], role, &self.entries)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (shape, role, data) = read_tensor(path)?;
        match shape.as_slice() {
            [count, dim] => Ok((Self::new(data, *count, *dim)?, role)),
            _ => Err(Error::Parse(format!(
                "codebook tensor must be 2-D, got shape {shape:?}"
            ))),
        }
    }
}

impl FeatureMap {
    pub fn save(&self, path: &Path, role: &str) -> Result<()> {
        write_tensor(
            path,
            &[self.height, self.width, self.dim],
            role,
            &self.values,
        )
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (shape, role, data) = read_tensor(path)?;
        match shape.as_slice() {
            [h, w, n] => Ok((Self::new(*h, *w, *n, data)?, role)),
            _ => Err(Error::Parse(format!(
                "feature tensor must be 3-D, got shape {shape:?}"
            ))),
        }
    }
}
