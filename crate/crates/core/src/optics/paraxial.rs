//! Small-angle (y, u) companion trace: focal length, back focal distance,
//! and the ideal field-angle ↔ image-height mapping.

use crate::error::{Error, Result};

use super::LensPrescription;

/// First-order summary of a prescription at one wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParaxialLens {
    /// Effective focal length, mm.
    pub efl_mm: f64,
    /// Back focal distance: last surface vertex to paraxial focus, mm.
    pub bfd_mm: f64,
}

impl ParaxialLens {
    /// Ideal image height for a field angle (radians), object at infinity.
    pub fn image_height_of(&self, theta_rad: f64) -> f64 {
        self.efl_mm * theta_rad.tan()
    }

    /// Field angle (radians) whose ideal image sits at `height_mm`.
    pub fn field_angle_of(&self, height_mm: f64) -> f64 {
        (height_mm / self.efl_mm).atan()
    }
}

/// Trace the marginal ray (y = 1, u = 0) through all surfaces.
///
/// Refraction: n′u′ = nu − yc(n′ − n); transfer: y ← y + u′·gap. Errors if
/// the system is afocal or diverging — neither can form a real image.
pub fn paraxial_trace(prescription: &LensPrescription, wavelength_um: f64) -> Result<ParaxialLens> {
    prescription.validate()?;
    let mut y = 1.0f64;
    let mut u = 0.0f64;
    let mut n = 1.0f64;
    for (i, surface) in prescription.surfaces.iter().enumerate() {
        let n_next = surface.index_after(wavelength_um)?;
        u = (n * u - y * surface.curvature * (n_next - n)) / n_next;
        n = n_next;
        if i + 1 < prescription.surfaces.len() {
            y += u * surface.thickness_after;
        }
    }
    if u >= -1e-12 {
        return Err(Error::Geometry(
            "prescription is afocal or diverging; no real focus".into(),
        ));
    }
    Ok(ParaxialLens { efl_mm: -1.0 / u, bfd_mm: -y / u })
}
