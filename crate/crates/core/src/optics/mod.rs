//! Sequential geometric ray tracing through rotationally symmetric spherical
//! lenses: dispersion, surface intersection, refraction, and a paraxial
//! companion trace.
//!
//! Conventions: geometry in millimeters, wavelengths in micrometers, angles in
//! radians internally (degrees only at config boundaries). The optical axis is
//! +z, with the first surface vertex at z = 0. The aperture stop sits at the
//! first surface, and object points are at infinity (collimated field bundles).

mod paraxial;
mod trace;

pub use paraxial::{paraxial_trace, ParaxialLens};
pub use trace::{
    field_direction, intersect_spherical, max_sag_residual, propagate, refract, surface_sag,
    trace_path, trace_to_image, RayOutcome, SurfaceEvent, SurfaceHit,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fraunhofer d-line (helium), µm. Reference line for catalog glass data.
pub const D_LINE_UM: f64 = 0.5876;
/// Fraunhofer F-line (hydrogen), µm.
pub const F_LINE_UM: f64 = 0.4861;
/// Fraunhofer C-line (hydrogen), µm.
pub const C_LINE_UM: f64 = 0.6563;

/// Tracing wavelengths mapped to the R, G, B channels, µm.
pub const RGB_WAVELENGTHS_UM: [f64; 3] = [C_LINE_UM, D_LINE_UM, F_LINE_UM];

/// Two-coefficient dispersion model n(λ) = A + B/λ².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialDispersion {
    /// Dimensionless base index.
    pub a: f64,
    /// Dispersion coefficient, µm².
    pub b: f64,
}

impl MaterialDispersion {
    /// Fit (A, B) to catalog data: d-line index `n_d` and Abbe number
    /// `v = (n_d − 1)/(n_F − n_C)`, evaluated at the F/C hydrogen lines.
    pub fn from_nd_abbe(n_d: f64, abbe: f64) -> Result<Self> {
        if !(n_d > 1.0) {
            return Err(Error::Config(format!("d-line index must exceed 1, got {n_d}")));
        }
        if !(abbe > 0.0) {
            return Err(Error::Config(format!("Abbe number must be positive, got {abbe}")));
        }
        let spread = 1.0 / (F_LINE_UM * F_LINE_UM) - 1.0 / (C_LINE_UM * C_LINE_UM);
        let b = (n_d - 1.0) / abbe / spread;
        let a = n_d - b / (D_LINE_UM * D_LINE_UM);
        Ok(Self { a, b })
    }

    /// Dispersion-free stand-in glass with constant index.
    pub fn constant(n: f64) -> Self {
        Self { a: n, b: 0.0 }
    }

    /// d-line index implied by the model.
    pub fn n_d(&self) -> f64 {
        self.a + self.b / (D_LINE_UM * D_LINE_UM)
    }

    /// Abbe number implied by the model; +∞ for dispersion-free glass.
    pub fn abbe(&self) -> f64 {
        let spread = 1.0 / (F_LINE_UM * F_LINE_UM) - 1.0 / (C_LINE_UM * C_LINE_UM);
        if self.b == 0.0 {
            f64::INFINITY
        } else {
            (self.n_d() - 1.0) / (self.b * spread)
        }
    }

    /// Index at `wavelength_um`; the model is trusted on 0.3–1.0 µm only.
    pub fn index(&self, wavelength_um: f64) -> Result<f64> {
        refractive_index(self, wavelength_um)
    }
}

/// n(λ) = A + B/λ² on the supported band.
pub fn refractive_index(material: &MaterialDispersion, wavelength_um: f64) -> Result<f64> {
    if !(0.3..=1.0).contains(&wavelength_um) {
        return Err(Error::Config(format!(
            "wavelength {wavelength_um} µm outside supported range [0.3, 1.0]"
        )));
    }
    Ok(material.a + material.b / (wavelength_um * wavelength_um))
}

/// One spherical interface plus the gap behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    /// Curvature c = 1/R in mm⁻¹; 0 is a plane.
    pub curvature: f64,
    /// Axial gap to the next surface (or to nothing, for the last one), mm.
    pub thickness_after: f64,
    /// Medium behind the surface; `None` is air.
    pub material_after: Option<MaterialDispersion>,
    /// Clear radius, mm.
    pub semi_diameter: f64,
}

impl Surface {
    /// Index of the medium behind this surface at `wavelength_um`.
    pub fn index_after(&self, wavelength_um: f64) -> Result<f64> {
        match &self.material_after {
            Some(m) => m.index(wavelength_um),
            None => Ok(1.0),
        }
    }
}

/// Complete system description: surfaces, field/aperture limits, image plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensPrescription {
    pub surfaces: Vec<Surface>,
    /// Maximum half field of view, degrees.
    pub max_half_fov_deg: f64,
    /// Stop radius at the first surface, mm.
    pub aperture_radius_mm: f64,
    /// Gap from the last surface vertex to the nominal image plane, mm.
    pub image_distance_mm: f64,
    /// Signed defocus added to `image_distance_mm`, mm.
    pub focus_shift_mm: f64,
}

impl LensPrescription {
    pub fn validate(&self) -> Result<()> {
        if self.surfaces.is_empty() {
            return Err(Error::Config("prescription needs at least one surface".into()));
        }
        if !(self.max_half_fov_deg > 0.0 && self.max_half_fov_deg < 90.0) {
            return Err(Error::Config(format!(
                "max_half_fov_deg must lie in (0, 90), got {}",
                self.max_half_fov_deg
            )));
        }
        if !(self.aperture_radius_mm > 0.0) {
            return Err(Error::Config(format!(
                "aperture_radius_mm must be positive, got {}",
                self.aperture_radius_mm
            )));
        }
        if !self.image_distance_mm.is_finite() || !self.focus_shift_mm.is_finite() {
            return Err(Error::Config("image distance and focus shift must be finite".into()));
        }
        for (i, s) in self.surfaces.iter().enumerate() {
            if !(s.semi_diameter > 0.0) {
                return Err(Error::Config(format!(
                    "surface {i}: semi_diameter must be positive"
                )));
            }
            if s.curvature.abs() * s.semi_diameter >= 1.0 {
                return Err(Error::Config(format!(
                    "surface {i}: |c|·semi_diameter must stay below 1 (full hemisphere)"
                )));
            }
            let is_last = i + 1 == self.surfaces.len();
            if !is_last && !(s.thickness_after > 0.0) {
                return Err(Error::Config(format!(
                    "surface {i}: thickness_after must be positive"
                )));
            }
            if let Some(m) = &s.material_after {
                // Endpoints suffice: n(λ) is monotone in λ on either sign of B.
                for lambda in [0.4, 0.7] {
                    if m.index(lambda)? <= 1.0 {
                        return Err(Error::Config(format!(
                            "surface {i}: material index must exceed 1 across 0.4–0.7 µm"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// z coordinate of surface `i`'s vertex (first surface at 0).
    pub fn vertex_z(&self, i: usize) -> f64 {
        self.surfaces[..i].iter().map(|s| s.thickness_after).sum()
    }

    /// z coordinate of the image plane, including focus shift.
    pub fn image_plane_z(&self) -> f64 {
        self.vertex_z(self.surfaces.len() - 1)
            + self.surfaces.last().map_or(0.0, |s| s.thickness_after)
            + self.image_distance_mm
            + self.focus_shift_mm
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawLensFile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("lens config: {e}")))?;
        let n = raw.surfaces.len();
        let surfaces = raw
            .surfaces
            .into_iter()
            .enumerate()
            .map(|(i, rs)| {
                let material_after = match (rs.n_d, rs.abbe) {
                    (Some(nd), Some(v)) => Some(MaterialDispersion::from_nd_abbe(nd, v)?),
                    (Some(nd), None) => Some(MaterialDispersion::constant(nd)),
                    (None, Some(_)) => {
                        return Err(Error::Config(format!(
                            "surface {i}: abbe given without n_d"
                        )))
                    }
                    (None, None) => None,
                };
                Ok(Surface {
                    curvature: rs.c,
                    thickness_after: rs.s.unwrap_or(if i + 1 == n { 0.0 } else { f64::NAN }),
                    material_after,
                    semi_diameter: rs.semi_diameter,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lens = Self {
            surfaces,
            max_half_fov_deg: raw.max_half_fov_deg,
            aperture_radius_mm: raw.aperture_radius_mm,
            image_distance_mm: raw.image_distance_mm,
            focus_shift_mm: raw.focus_shift_mm.unwrap_or(0.0),
        };
        if lens.surfaces.iter().any(|s| s.thickness_after.is_nan()) {
            return Err(Error::Config(
                "every surface except the last needs an explicit gap `s`".into(),
            ));
        }
        lens.validate()?;
        Ok(lens)
    }

    pub fn to_toml_string(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "max_half_fov_deg = {:?}", self.max_half_fov_deg).unwrap();
        writeln!(out, "aperture_radius_mm = {:?}", self.aperture_radius_mm).unwrap();
        writeln!(out, "image_distance_mm = {:?}", self.image_distance_mm).unwrap();
        writeln!(out, "focus_shift_mm = {:?}", self.focus_shift_mm).unwrap();
        for s in &self.surfaces {
            writeln!(out, "\n[[surfaces]]").unwrap();
            writeln!(out, "c = {:?}", s.curvature).unwrap();
            writeln!(out, "s = {:?}", s.thickness_after).unwrap();
            if let Some(m) = &s.material_after {
                writeln!(out, "n_d = {:?}", m.n_d()).unwrap();
                if m.b != 0.0 {
                    writeln!(out, "abbe = {:?}", m.abbe()).unwrap();
                }
            }
            writeln!(out, "semi_diameter = {:?}", s.semi_diameter).unwrap();
        }
        out
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Hex SHA-256 over a canonical little-endian encoding of every field.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.surfaces.len() as u64).to_le_bytes());
        for s in &self.surfaces {
            h.update(s.curvature.to_le_bytes());
            h.update(s.thickness_after.to_le_bytes());
            match &s.material_after {
                Some(m) => {
                    h.update([1u8]);
                    h.update(m.a.to_le_bytes());
                    h.update(m.b.to_le_bytes());
                }
                None => h.update([0u8; 17]),
            }
            h.update(s.semi_diameter.to_le_bytes());
        }
        h.update(self.max_half_fov_deg.to_le_bytes());
        h.update(self.aperture_radius_mm.to_le_bytes());
        h.update(self.image_distance_mm.to_le_bytes());
        h.update(self.focus_shift_mm.to_le_bytes());
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Deserialize)]
struct RawLensFile {
    surfaces: Vec<RawSurface>,
    max_half_fov_deg: f64,
    aperture_radius_mm: f64,
    image_distance_mm: f64,
    focus_shift_mm: Option<f64>,
}

#[derive(Deserialize)]
struct RawSurface {
    c: f64,
    s: Option<f64>,
    n_d: Option<f64>,
    abbe: Option<f64>,
    semi_diameter: f64,
}

/// A single ray in flight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    /// Position S, mm.
    pub origin: [f64; 3],
    /// Unit direction D.
    pub direction: [f64; 3],
    /// Relative energy carried (1.0 unless weighted sampling is in play).
    pub intensity_weight: f64,
    /// Cleared once the ray is vignetted or totally internally reflected.
    pub alive: bool,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3]) -> Self {
        Self { origin, direction, intensity_weight: 1.0, alive: true }
    }
}
