//! Exact (non-paraxial) sequential ray tracing primitives.

use crate::error::{Error, Result};

use super::{LensPrescription, Ray, Surface};

/// Outcome of intersecting one ray with one surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurfaceEvent {
    Hit {
        /// Intersection point, mm.
        point: [f64; 3],
        /// Unit surface normal oriented against the incoming ray.
        normal: [f64; 3],
        /// Path length from the ray origin, mm.
        t: f64,
    },
    /// Ray missed the cap or fell outside the clear radius.
    Dead,
}

/// Final state of a fully traced ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayOutcome {
    /// Image-plane coordinates, mm.
    Hit { x: f64, y: f64 },
    /// Lost to vignetting, a miss, or total internal reflection.
    Dead,
}

/// One recorded surface interaction, kept for replay checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub surface_index: usize,
    pub point: [f64; 3],
    pub vertex_z: f64,
    pub curvature: f64,
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Axial height of a spherical surface at radial distance `r` from its vertex:
/// z = cr² / (1 + √(1 − c²r²)).
pub fn surface_sag(curvature: f64, radial_distance: f64) -> Result<f64> {
    let q = curvature * curvature * radial_distance * radial_distance;
    if q >= 1.0 {
        return Err(Error::Geometry(format!(
            "radial distance {radial_distance} beyond the hemisphere of curvature {curvature}"
        )));
    }
    Ok(curvature * radial_distance * radial_distance / (1.0 + (1.0 - q).sqrt()))
}

/// Advance a ray by path length `t`: S′ = S + tD.
pub fn propagate(ray: &Ray, t: f64) -> [f64; 3] {
    add(ray.origin, scale(ray.direction, t))
}

/// Collimated bundle direction for a field angle pair (θx, θy), radians.
pub fn field_direction(theta_x: f64, theta_y: f64) -> [f64; 3] {
    let (tx, ty) = (theta_x.tan(), theta_y.tan());
    let norm = (tx * tx + ty * ty + 1.0).sqrt();
    [tx / norm, ty / norm, 1.0 / norm]
}

// Rays steeper than this against the axis cannot reach a forward plane.
const MIN_AXIAL_DIR: f64 = 1e-12;
// Near-tangential quadratic roots are treated as misses.
const MIN_DISCRIMINANT: f64 = 1e-14;

/// Intersect a ray with the spherical cap whose vertex sits at `vertex_z`.
///
/// The returned point satisfies the sag equation of the cap (not the far
/// hemisphere of the same sphere), the normal is oriented against the ray,
/// and `t` is the smallest positive root on that branch.
pub fn intersect_spherical(ray: &Ray, surface: &Surface, vertex_z: f64) -> Result<SurfaceEvent> {
    if !ray.alive {
        return Ok(SurfaceEvent::Dead);
    }
    let c = surface.curvature;
    let (point, t) = if c == 0.0 {
        if ray.direction[2].abs() < MIN_AXIAL_DIR {
            return Ok(SurfaceEvent::Dead);
        }
        let t = (vertex_z - ray.origin[2]) / ray.direction[2];
        if t <= 0.0 {
            return Err(Error::Geometry(format!(
                "plane at z = {vertex_z} lies behind the ray (t = {t})"
            )));
        }
        (propagate(ray, t), t)
    } else {
        // Full sphere: |P − C|² = R², C = (0, 0, vertex_z + 1/c).
        let radius = 1.0 / c;
        let center = [0.0, 0.0, vertex_z + radius];
        let oc = [
            ray.origin[0] - center[0],
            ray.origin[1] - center[1],
            ray.origin[2] - center[2],
        ];
        let half_b = dot(oc, ray.direction);
        let disc = half_b * half_b - (dot(oc, oc) - radius * radius);
        if disc < MIN_DISCRIMINANT {
            return Ok(SurfaceEvent::Dead);
        }
        let sq = disc.sqrt();
        // Keep only roots on the near-vertex hemisphere, where the sag
        // branch 1 − c·(z − vertex_z) ≥ 0 holds; the far hemisphere of the
        // same sphere is not part of the surface.
        let mut best: Option<f64> = None;
        for root in [-half_b - sq, -half_b + sq] {
            if root <= 0.0 {
                continue;
            }
            let z_rel = ray.origin[2] + root * ray.direction[2] - vertex_z;
            if c * z_rel <= 1.0 && best.is_none_or(|b| root < b) {
                best = Some(root);
            }
        }
        let Some(t) = best else {
            // Both roots behind the ray means the geometry is inconsistent;
            // both on the far hemisphere is an ordinary miss.
            let t_max = -half_b + sq;
            if t_max <= 0.0 {
                return Err(Error::Geometry(format!(
                    "surface at z = {vertex_z} lies behind the ray"
                )));
            }
            return Ok(SurfaceEvent::Dead);
        };
        (propagate(ray, t), t)
    };

    let r_hit = (point[0] * point[0] + point[1] * point[1]).sqrt();
    if r_hit > surface.semi_diameter {
        return Ok(SurfaceEvent::Dead);
    }

    let normal = if c == 0.0 {
        let sign = if ray.direction[2] > 0.0 { -1.0 } else { 1.0 };
        [0.0, 0.0, sign]
    } else {
        // Unit gradient of the sphere equation, then flipped against the ray.
        let radius = 1.0 / c;
        let center_z = vertex_z + radius;
        let mut n = scale([point[0], point[1], point[2] - center_z], c.abs());
        if dot(n, ray.direction) > 0.0 {
            n = scale(n, -1.0);
        }
        n
    };
    Ok(SurfaceEvent::Hit { point, normal, t })
}

/// Vector Snell refraction at an interface with indices `n1` → `n2`.
///
/// The normal may point either way; it is re-oriented against the incoming
/// direction internally. Errors with `TotalInternalReflection` past the
/// critical angle.
pub fn refract(direction: [f64; 3], normal: [f64; 3], n1: f64, n2: f64) -> Result<[f64; 3]> {
    let mut p = normal;
    if dot(p, direction) > 0.0 {
        p = scale(p, -1.0);
    }
    let cos_i = -dot(p, direction);
    let mu = n1 / n2;
    let radicand = 1.0 - mu * mu * (1.0 - cos_i * cos_i);
    if radicand < 0.0 {
        return Err(Error::TotalInternalReflection);
    }
    Ok(add(scale(direction, mu), scale(p, mu * cos_i - radicand.sqrt())))
}

/// Trace one ray through every surface and onto the image plane.
///
/// `field_dir` is the collimated bundle direction; `pupil_point` lies on the
/// stop plane (the first surface's vertex plane). Vignetting, misses, and TIR
/// yield `RayOutcome::Dead`; inconsistent geometry is an error.
pub fn trace_to_image(
    prescription: &LensPrescription,
    field_dir: [f64; 3],
    pupil_point: (f64, f64),
    wavelength_um: f64,
) -> Result<RayOutcome> {
    Ok(match trace_path(prescription, field_dir, pupil_point, wavelength_um)? {
        Some((x, y, _)) => RayOutcome::Hit { x, y },
        None => RayOutcome::Dead,
    })
}

/// As [`trace_to_image`], additionally returning every surface hit for
/// residual replay. `None` means the ray died.
pub fn trace_path(
    prescription: &LensPrescription,
    field_dir: [f64; 3],
    pupil_point: (f64, f64),
    wavelength_um: f64,
) -> Result<Option<(f64, f64, Vec<SurfaceHit>)>> {
    let (px, py) = pupil_point;
    let r2 = px * px + py * py;
    let r_aper = prescription.aperture_radius_mm;
    if r2 > r_aper * r_aper * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "pupil point ({px}, {py}) outside aperture radius {r_aper}"
        )));
    }
    if field_dir[2] < MIN_AXIAL_DIR {
        return Err(Error::Config("field direction must run toward +z".into()));
    }

    // Start far enough back that no surface cap can sit behind the origin:
    // |sag| is bounded by the semi-diameter whenever |c|·semi < 1.
    let start_margin = prescription
        .surfaces
        .first()
        .map_or(1.0, |s| s.semi_diameter + 1.0);
    let t_back = start_margin / field_dir[2];
    let origin = [
        px - t_back * field_dir[0],
        py - t_back * field_dir[1],
        -start_margin,
    ];
    let mut ray = Ray::new(origin, field_dir);
    let mut hits = Vec::with_capacity(prescription.surfaces.len());
    let mut n_before = 1.0;

    for (i, surface) in prescription.surfaces.iter().enumerate() {
        let vz = prescription.vertex_z(i);
        let event = intersect_spherical(&ray, surface, vz)?;
        let SurfaceEvent::Hit { point, normal, .. } = event else {
            return Ok(None);
        };
        hits.push(SurfaceHit {
            surface_index: i,
            point,
            vertex_z: vz,
            curvature: surface.curvature,
        });
        let n_after = surface.index_after(wavelength_um)?;
        match refract(ray.direction, normal, n_before, n_after) {
            Ok(d) => {
                ray.origin = point;
                ray.direction = d;
                n_before = n_after;
            }
            Err(Error::TotalInternalReflection) => return Ok(None),
            Err(e) => return Err(e),
        }
    }

    if ray.direction[2] < MIN_AXIAL_DIR {
        return Ok(None);
    }
    let t = (prescription.image_plane_z() - ray.origin[2]) / ray.direction[2];
    if t <= 0.0 {
        return Err(Error::Geometry("image plane lies behind the last surface hit".into()));
    }
    let end = propagate(&ray, t);
    Ok(Some((end[0], end[1], hits)))
}

/// Largest sag-equation residual (mm) over a recorded path; replay check.
pub fn max_sag_residual(hits: &[SurfaceHit]) -> f64 {
    hits.iter()
        .map(|h| {
            let r = (h.point[0] * h.point[0] + h.point[1] * h.point[1]).sqrt();
            let sag = surface_sag(h.curvature, r).unwrap_or(f64::NAN);
            ((h.point[2] - h.vertex_z) - sag).abs()
        })
        .fold(0.0, f64::max)
}
