//! The shipped reference configs must stay parseable, traceable, and true
//! to their documented optical properties.

use std::path::PathBuf;

use aberray::optics::{
    field_direction, paraxial_trace, trace_to_image, RayOutcome, D_LINE_UM, RGB_WAVELENGTHS_UM,
};
use aberray::psf::sample_pupil;
use aberray::{IspParams, LensPrescription};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Field-averaged polychromatic RMS spot radius (µm) over 11 equal-angle
/// fields, pooled over the RGB design wavelengths.
fn avg_rms_um(p: &LensPrescription, rays: usize) -> f64 {
    let pupil = sample_pupil(p.aperture_radius_mm, rays).unwrap();
    let mut acc = 0.0;
    const FIELDS: usize = 11;
    for i in 0..FIELDS {
        let theta = (p.max_half_fov_deg * i as f64 / (FIELDS - 1) as f64).to_radians();
        let dir = field_direction(0.0, theta);
        let mut hits = Vec::new();
        for wl in RGB_WAVELENGTHS_UM {
            for &(px, py) in &pupil.points {
                match trace_to_image(p, dir, (px, py), wl).unwrap() {
                    RayOutcome::Hit { x, y } => hits.push((x, y)),
                    RayOutcome::Dead => panic!("vignetted ray at field {theta}"),
                }
            }
        }
        acc += aberray::psf::rms_spot_radius(&hits).unwrap();
    }
    acc / FIELDS as f64
}

#[test]
fn biconvex_reference_matches_documented_figures() {
    let p = LensPrescription::load_toml(&config("mos_s1.toml")).unwrap();
    let par = paraxial_trace(&p, D_LINE_UM).unwrap();
    assert!((par.efl_mm - 15.259993057259566).abs() < 1e-9);
    assert_eq!(p.image_distance_mm, par.bfd_mm);
    assert_eq!(p.focus_shift_mm, 0.0);
    // Sensor coverage: 1024×2048 at 11.43 µm pitch, half diagonal 13.09 mm.
    assert!(par.image_height_of(p.max_half_fov_deg.to_radians()) > 13.09);
    let rms = avg_rms_um(&p, 1024);
    assert!((rms - 79.18).abs() < 0.2, "average RMS drifted to {rms} um");
}

#[test]
fn meniscus_reference_matches_documented_figures() {
    let p = LensPrescription::load_toml(&config("mos_s2.toml")).unwrap();
    let par = paraxial_trace(&p, D_LINE_UM).unwrap();
    assert!((par.efl_mm - 36.19937426701788).abs() < 1e-9);
    assert_eq!(p.image_distance_mm, par.bfd_mm);
    assert_eq!(p.focus_shift_mm, 0.0);
    assert!(par.image_height_of(p.max_half_fov_deg.to_radians()) > 13.09);
    let rms = avg_rms_um(&p, 1024);
    assert!((rms - 79.59).abs() < 0.2, "average RMS drifted to {rms} um");
}

#[test]
fn stopped_down_references_have_negligible_distortion() {
    // At 1 % aperture the surviving bundle is the chief-ray pencil; its
    // image height must track efl·tan θ to a small fraction of a percent.
    for name in ["mos_s1.toml", "mos_s2.toml"] {
        let mut p = LensPrescription::load_toml(&config(name)).unwrap();
        p.aperture_radius_mm *= 0.01;
        let par = paraxial_trace(&p, D_LINE_UM).unwrap();
        let pupil = sample_pupil(p.aperture_radius_mm, 256).unwrap();
        for theta_deg in [1.0f64, 5.0, 10.0] {
            let dir = field_direction(0.0, theta_deg.to_radians());
            let (mut cy, mut n) = (0.0, 0usize);
            for &(px, py) in &pupil.points {
                if let RayOutcome::Hit { y, .. } = trace_to_image(&p, dir, (px, py), D_LINE_UM).unwrap()
                {
                    cy += y;
                    n += 1;
                }
            }
            cy /= n as f64;
            let ideal = par.efl_mm * theta_deg.to_radians().tan();
            let rel = (cy / ideal - 1.0).abs();
            assert!(rel < 0.005, "{name} at {theta_deg}°: relative error {rel}");
        }
    }
}

#[test]
fn default_sensor_config_parses_and_inverts() {
    let params = IspParams::load_toml(&config("isp_default.toml")).unwrap();
    params.validate().unwrap();
    assert_eq!(params.gamma, 2.2);
    for row in params.ccm {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
