//! Referenced image-quality metrics: PSNR and single-scale SSIM.
//!
//! SSIM follows the classic single-scale recipe: Rec.601 luma, an 11×11
//! Gaussian window with σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1, and
//! the mean taken over valid windows only (no border padding).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::ImageBuf;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB: 10·log10(peak² / MSE), computed over
/// all channels in f64. Identical images return +∞.
pub fn psnr(reference: &ImageBuf, test: &ImageBuf, peak: f64) -> Result<f64> {
    if !reference.same_shape(test) {
        return Err(Error::Shape(format!(
            "PSNR needs equal shapes, got {}x{}x{} vs {}x{}x{}",
            reference.height,
            reference.width,
            reference.channels,
            test.height,
            test.width,
            test.channels
        )));
    }
    if !peak.is_finite() || peak <= 0.0 {
        return Err(Error::Config(format!("peak must be positive, got {peak}")));
    }
    let mut sum = 0.0f64;
    for (&a, &b) in reference.data().iter().zip(test.data()) {
        let d = a as f64 - b as f64;
        sum += d * d;
    }
    let mse = sum / reference.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Rec.601 luma of a 1- or 3-channel image, widened to f64.
fn luma_plane(img: &ImageBuf) -> Result<Vec<f64>> {
    match img.channels {
        1 => Ok(img.plane(0).iter().map(|&v| v as f64).collect()),
        3 => {
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            Ok((0..r.len())
                .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64)
                .collect())
        }
        n => Err(Error::Shape(format!("luma needs 1 or 3 channels, got {n}"))),
    }
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Separable windowed mean over valid positions only; the output is
/// (h − win + 1) × (w − win + 1).
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0f64; h * wo];
    horiz.par_chunks_mut(wo).enumerate().for_each(|(y, row)| {
        let src_row = &src[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, &v) in taps.iter().zip(&src_row[x..x + SSIM_WINDOW]) {
                acc += t * v;
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0f64; ho * wo];
    out.par_chunks_mut(wo).enumerate().for_each(|(y, row)| {
        for (dy, &t) in taps.iter().enumerate() {
            let hrow = &horiz[(y + dy) * wo..(y + dy + 1) * wo];
            for (o, &v) in row.iter_mut().zip(hrow) {
                *o += t * v;
            }
        }
    });
    out
}

/// Mean structural similarity over valid windows. Symmetric in its
/// arguments and 1.0 exactly for identical images.
pub fn ssim(reference: &ImageBuf, test: &ImageBuf) -> Result<f64> {
    if !reference.same_shape(test) {
        return Err(Error::Shape(format!(
            "SSIM needs equal shapes, got {}x{}x{} vs {}x{}x{}",
            reference.height,
            reference.width,
            reference.channels,
            test.height,
            test.width,
            test.channels
        )));
    }
    let (h, w) = (reference.height, reference.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let x = luma_plane(reference)?;
    let y = luma_plane(test)?;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let taps = gaussian_taps();
    let ux = filter_valid(&x, h, w, &taps);
    let uy = filter_valid(&y, h, w, &taps);
    let uxx = filter_valid(&xx, h, w, &taps);
    let uyy = filter_valid(&yy, h, w, &taps);
    let uxy = filter_valid(&xy, h, w, &taps);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut sum = 0.0f64;
    for i in 0..ux.len() {
        let (mx, my) = (ux[i], uy[i]);
        let vx = uxx[i] - mx * mx;
        let vy = uyy[i] - my * my;
        let vxy = uxy[i] - mx * my;
        sum += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(sum / ux.len() as f64)
}

/// Serialize an infinite PSNR (identical images) as JSON null.
mod psnr_db_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Metrics for one reference/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    /// dB; null in JSON when infinite (identical images).
    #[serde(with = "psnr_db_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-pair metrics plus their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub aggregate: PairMetrics,
}

impl MetricReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("metric report needs at least one pair".into()));
        }
        let n = pairs.len() as f64;
        let aggregate = PairMetrics {
            psnr_db: pairs.iter().map(|p| p.psnr_db).sum::<f64>() / n,
            ssim: pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
        };
        Ok(Self { pairs, aggregate })
    }
}

/// PSNR and SSIM for one reference/test pair at unit peak.
pub fn measure_pair(reference: &ImageBuf, test: &ImageBuf) -> Result<PairMetrics> {
    Ok(PairMetrics {
        psnr_db: psnr(reference, test, 1.0)?,
        ssim: ssim(reference, test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::counter_normal;
    use proptest::prelude::*;

    fn gray_pair() -> (ImageBuf, ImageBuf) {
        let a = ImageBuf::from_fn(64, 64, 1, |y, x, _| ((y * 31 + x * 17) % 97) as f32 / 96.0)
            .unwrap();
        let b = ImageBuf::from_fn(64, 64, 1, |y, x, _| ((y * 13 + x * 7) % 89) as f32 / 88.0)
            .unwrap();
        (a, b)
    }

    fn rgb_pair() -> (ImageBuf, ImageBuf) {
        let a = ImageBuf::from_fn(32, 48, 3, |y, x, c| {
            ((y * 31 + x * 17 + c * 53) % 97) as f32 / 96.0
        })
        .unwrap();
        let b = ImageBuf::from_fn(32, 48, 3, |y, x, c| {
            ((y * 7 + x * 11 + c * 3) % 83) as f32 / 82.0
        })
        .unwrap();
        (a, b)
    }

    #[test]
    fn identical_images_give_infinite_psnr_and_unit_ssim() {
        let (a, _) = gray_pair();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_hand_mse() {
        // Zero vs constant 0.1: MSE 0.01 → 20 dB.
        let zero = ImageBuf::constant(16, 16, 1, 0.0).unwrap();
        let offset = ImageBuf::constant(16, 16, 1, 0.1).unwrap();
        assert!((psnr(&zero, &offset, 1.0).unwrap() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn psnr_golden_values() {
        let (a, b) = gray_pair();
        assert!((psnr(&a, &b, 1.0).unwrap() - 7.6609079749824982).abs() < 1e-6);
        let (ra, rb) = rgb_pair();
        assert!((psnr(&ra, &rb, 1.0).unwrap() - 7.6959474939037209).abs() < 1e-6);
    }

    #[test]
    fn ssim_golden_values() {
        let (a, b) = gray_pair();
        assert!((ssim(&a, &b).unwrap() - 0.010861834339524888).abs() < 1e-6);
        let (ra, rb) = rgb_pair();
        assert!((ssim(&ra, &rb).unwrap() - 0.011680079318650631).abs() < 1e-6);
    }

    #[test]
    fn ssim_is_symmetric() {
        let (a, b) = gray_pair();
        let fwd = ssim(&a, &b).unwrap();
        let rev = ssim(&b, &a).unwrap();
        assert!((fwd - rev).abs() < 1e-12);
    }

    #[test]
    fn psnr_is_translation_invariant() {
        let (a, b) = gray_pair();
        let scale = |img: &ImageBuf, c: f32| {
            ImageBuf::from_fn(img.height, img.width, img.channels, |y, x, ch| {
                0.5 * img.get(y, x, ch) + c
            })
            .unwrap()
        };
        let base = psnr(&scale(&a, 0.0), &scale(&b, 0.0), 1.0).unwrap();
        let shifted = psnr(&scale(&a, 0.25), &scale(&b, 0.25), 1.0).unwrap();
        assert!((base - shifted).abs() < 1e-6);
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let (a, _) = gray_pair();
        let noisy = |amp: f32, seed: u64| {
            ImageBuf::from_fn(64, 64, 1, |y, x, _| {
                a.get(y, x, 0) + amp * counter_normal(seed, (y * 64 + x) as u64) as f32
            })
            .unwrap()
        };
        let p1 = psnr(&a, &noisy(0.05, 9), 1.0).unwrap();
        let p2 = psnr(&a, &noisy(0.10, 9), 1.0).unwrap();
        assert!(p1 > p2);
    }

    #[test]
    fn heavy_noise_destroys_structure() {
        let (a, _) = gray_pair();
        let noisy = ImageBuf::from_fn(64, 64, 1, |y, x, _| {
            (a.get(y, x, 0) + 0.5 * counter_normal(41, (y * 64 + x) as u64) as f32)
                .clamp(0.0, 1.0)
        })
        .unwrap();
        assert!(ssim(&a, &noisy).unwrap() < 0.5);
    }

    #[test]
    fn brightness_shift_scores_above_same_amplitude_noise() {
        let base = ImageBuf::from_fn(64, 64, 1, |y, x, _| {
            0.1 + 0.6 * (((y * 31 + x * 17) % 97) as f32 / 96.0)
        })
        .unwrap();
        let bright = ImageBuf::from_fn(64, 64, 1, |y, x, _| base.get(y, x, 0) + 0.2).unwrap();
        let noisy = ImageBuf::from_fn(64, 64, 1, |y, x, _| {
            (base.get(y, x, 0) + 0.2 * counter_normal(17, (y * 64 + x) as u64) as f32)
                .clamp(0.0, 1.0)
        })
        .unwrap();
        assert!(ssim(&base, &bright).unwrap() > ssim(&base, &noisy).unwrap());
    }

    #[test]
    fn single_pixel_change_breaks_perfection() {
        let (a, _) = gray_pair();
        let mut b = a.clone();
        b.set(30, 30, 0, (a.get(30, 30, 0) + 0.1).min(1.0));
        assert!(psnr(&a, &b, 1.0).unwrap().is_finite());
        assert!(ssim(&a, &b).unwrap() < 1.0 - 1e-9);
    }

    #[test]
    fn shape_and_size_preconditions() {
        let a = ImageBuf::constant(16, 16, 1, 0.5).unwrap();
        let b = ImageBuf::constant(16, 20, 1, 0.5).unwrap();
        assert!(matches!(psnr(&a, &b, 1.0), Err(Error::Shape(_))));
        assert!(matches!(ssim(&a, &b), Err(Error::Shape(_))));
        let tiny = ImageBuf::constant(8, 8, 1, 0.5).unwrap();
        assert!(matches!(ssim(&tiny, &tiny), Err(Error::Shape(_))));
        assert!(matches!(psnr(&a, &a, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn report_aggregates_and_serializes_infinity_as_null() {
        let report = MetricReport::from_pairs(vec![
            PairMetrics {
                psnr_db: 20.0,
                ssim: 0.9,
            },
            PairMetrics {
                psnr_db: f64::INFINITY,
                ssim: 1.0,
            },
        ])
        .unwrap();
        assert_eq!(report.aggregate.psnr_db, f64::INFINITY);
        assert!((report.aggregate.ssim - 0.95).abs() < 1e-12);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"psnr_db\":null"));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(MetricReport::from_pairs(Vec::new()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn prop_symmetry_and_range(seed in 0u64..500) {
            let a = ImageBuf::from_fn(12, 14, 1, |y, x, _| {
                (((y as u64 * 131 + x as u64 * 37 + seed) % 89) as f32) / 89.0
            }).unwrap();
            let b = ImageBuf::from_fn(12, 14, 1, |y, x, _| {
                (((y as u64 * 59 + x as u64 * 23 + seed * 7) % 83) as f32) / 83.0
            }).unwrap();
            let s_ab = ssim(&a, &b).unwrap();
            let s_ba = ssim(&b, &a).unwrap();
            prop_assert!((s_ab - s_ba).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s_ab));
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }
    }
}
