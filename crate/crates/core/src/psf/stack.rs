//! PSF stack file format.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! "APSF"  magic
//! u32     version (1)
//! u32     grid_h, grid_w, n_wavelengths, kernel_size, patch_size
//! f32     pixel_pitch_um
//! f32[..] kernel weights in [grid_h][grid_w][wavelength][k][k] order
//! f32[..] centroid offsets as (dx, dy) pairs in the same kernel order
//! ```
//!
//! A JSON sidecar at `<path>.json` duplicates the header and carries the
//! fields the binary cannot: wavelengths, image dims, and out-of-field
//! patches. Loading works without the sidecar for 3-channel stacks, falling
//! back to the default R/G/B wavelengths and full-patch image dims.

use std::ffi::OsString;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::RGB_WAVELENGTHS_UM;

use super::{PsfGrid, PsfKernel};

const MAGIC: &[u8; 4] = b"APSF";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    grid_h: usize,
    grid_w: usize,
    n_wavelengths: usize,
    kernel_size: usize,
    patch_size: usize,
    pixel_pitch_um: f64,
    wavelengths_um: Vec<f64>,
    image_dims: (usize, usize),
    out_of_field: Vec<(usize, usize)>,
    mean_clipped_fraction: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_psf_stack(path: &Path, grid: &PsfGrid) -> Result<()> {
    let k = grid.kernel_size();
    if k == 0 {
        return Err(Error::Shape("cannot save an empty PSF grid".into()));
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    for v in [
        VERSION,
        grid.grid_h as u32,
        grid.grid_w as u32,
        grid.n_wavelengths() as u32,
        k as u32,
        grid.patch_size_px as u32,
    ] {
        f.write_u32::<LittleEndian>(v)?;
    }
    f.write_f32::<LittleEndian>(grid.pixel_pitch_um as f32)?;
    for kernel in &grid.kernels {
        for &w in &kernel.weights {
            f.write_f32::<LittleEndian>(w as f32)?;
        }
    }
    for kernel in &grid.kernels {
        f.write_f32::<LittleEndian>(kernel.center_offset.0 as f32)?;
        f.write_f32::<LittleEndian>(kernel.center_offset.1 as f32)?;
    }
    f.flush()?;

    let clipped = if grid.kernels.is_empty() {
        0.0
    } else {
        grid.kernels.iter().map(|kn| kn.clipped_fraction).sum::<f64>() / grid.kernels.len() as f64
    };
    let sidecar = Sidecar {
        version: VERSION,
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        n_wavelengths: grid.n_wavelengths(),
        kernel_size: k,
        patch_size: grid.patch_size_px,
        pixel_pitch_um: grid.pixel_pitch_um,
        wavelengths_um: grid.wavelengths_um.clone(),
        image_dims: grid.image_dims,
        out_of_field: grid.out_of_field.clone(),
        mean_clipped_fraction: clipped,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Parse(format!("sidecar encode: {e}")))?;
    std::fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

pub fn load_psf_stack(path: &Path) -> Result<PsfGrid> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse("not a PSF stack (bad magic)".into()));
    }
    let version = f.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported PSF stack version {version}")));
    }
    let grid_h = f.read_u32::<LittleEndian>()? as usize;
    let grid_w = f.read_u32::<LittleEndian>()? as usize;
    let n_wl = f.read_u32::<LittleEndian>()? as usize;
    let kernel_size = f.read_u32::<LittleEndian>()? as usize;
    let patch_size = f.read_u32::<LittleEndian>()? as usize;
    let pitch = f.read_f32::<LittleEndian>()? as f64;
    let n_kernels = grid_h
        .checked_mul(grid_w)
        .and_then(|v| v.checked_mul(n_wl))
        .ok_or_else(|| Error::Parse("PSF stack header overflows".into()))?;
    if n_kernels == 0 || kernel_size == 0 || kernel_size % 2 == 0 || patch_size == 0 {
        return Err(Error::Parse("degenerate PSF stack header".into()));
    }
    if n_kernels * kernel_size * kernel_size > 1 << 31 {
        return Err(Error::Parse("PSF stack implausibly large".into()));
    }

    let mut kernels = Vec::with_capacity(n_kernels);
    let taps = kernel_size * kernel_size;
    for _ in 0..n_kernels {
        let mut weights = vec![0f32; taps];
        f.read_f32_into::<LittleEndian>(&mut weights)?;
        kernels.push(PsfKernel {
            size: kernel_size,
            weights: weights.into_iter().map(|w| w as f64).collect(),
            pixel_pitch_um: pitch,
            center_offset: (0.0, 0.0),
            clipped_fraction: 0.0,
        });
    }
    for kernel in &mut kernels {
        let dx = f.read_f32::<LittleEndian>()? as f64;
        let dy = f.read_f32::<LittleEndian>()? as f64;
        kernel.center_offset = (dx, dy);
    }
    let mut probe = [0u8; 1];
    if f.read(&mut probe)? != 0 {
        return Err(Error::Parse("trailing bytes after PSF stack payload".into()));
    }

    let mut grid = PsfGrid {
        kernels,
        grid_h,
        grid_w,
        patch_size_px: patch_size,
        image_dims: (grid_h * patch_size, grid_w * patch_size),
        pixel_pitch_um: pitch,
        wavelengths_um: Vec::new(),
        out_of_field: Vec::new(),
    };

    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar)?;
        let sc: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("sidecar: {e}")))?;
        let header_matches = sc.version == version
            && sc.grid_h == grid_h
            && sc.grid_w == grid_w
            && sc.n_wavelengths == n_wl
            && sc.kernel_size == kernel_size
            && sc.patch_size == patch_size
            && (sc.pixel_pitch_um - pitch).abs() < 1e-6
            && sc.wavelengths_um.len() == n_wl;
        if !header_matches {
            return Err(Error::Parse(
                "PSF stack sidecar disagrees with the binary header".into(),
            ));
        }
        grid.wavelengths_um = sc.wavelengths_um;
        grid.image_dims = sc.image_dims;
        grid.out_of_field = sc.out_of_field;
    } else if n_wl == 3 {
        grid.wavelengths_um = RGB_WAVELENGTHS_UM.to_vec();
    } else {
        return Err(Error::Parse(format!(
            "PSF stack sidecar missing and wavelength count {n_wl} has no default"
        )));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{paraxial_trace, LensPrescription, MaterialDispersion, Surface, D_LINE_UM};
    use crate::psf::{build_psf_grid, PsfBuildParams};

    fn small_grid() -> PsfGrid {
        let mut lens = LensPrescription {
            surfaces: vec![
                Surface {
                    curvature: 0.01,
                    thickness_after: 2.0,
                    material_after: Some(MaterialDispersion::from_nd_abbe(1.5168, 64.17).unwrap()),
                    semi_diameter: 9.0,
                },
                Surface {
                    curvature: -0.01,
                    thickness_after: 0.0,
                    material_after: None,
                    semi_diameter: 9.0,
                },
            ],
            max_half_fov_deg: 25.0,
            aperture_radius_mm: 2.0,
            image_distance_mm: 0.0,
            focus_shift_mm: 0.0,
        };
        lens.image_distance_mm = paraxial_trace(&lens, D_LINE_UM).unwrap().bfd_mm;
        let params = PsfBuildParams {
            patch_size_px: 16,
            rays_per_bundle: 64,
            kernel_size_px: 9,
            ..Default::default()
        };
        build_psf_grid(&lens, (48, 64), &params).unwrap()
    }

    #[test]
    fn stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.apsf");
        let grid = small_grid();
        save_psf_stack(&path, &grid).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = load_psf_stack(&path).unwrap();
        assert_eq!(back.grid_h, grid.grid_h);
        assert_eq!(back.grid_w, grid.grid_w);
        assert_eq!(back.image_dims, grid.image_dims);
        assert_eq!(back.wavelengths_um, grid.wavelengths_um);
        assert_eq!(back.out_of_field, grid.out_of_field);
        for (a, b) in grid.kernels.iter().zip(&back.kernels) {
            for (wa, wb) in a.weights.iter().zip(&b.weights) {
                assert!((wa - wb).abs() <= wa.abs() * 1e-6 + 1e-9);
            }
            assert!((a.center_offset.0 - b.center_offset.0).abs() < 1e-6);
        }
    }

    #[test]
    fn save_load_save_is_bit_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.apsf");
        let p2 = dir.path().join("b.apsf");
        let grid = small_grid();
        save_psf_stack(&p1, &grid).unwrap();
        let back = load_psf_stack(&p1).unwrap();
        save_psf_stack(&p2, &back).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn loading_without_sidecar_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.apsf");
        let grid = small_grid();
        save_psf_stack(&path, &grid).unwrap();
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        let back = load_psf_stack(&path).unwrap();
        assert_eq!(back.wavelengths_um, RGB_WAVELENGTHS_UM.to_vec());
        assert_eq!(
            back.image_dims,
            (grid.grid_h * grid.patch_size_px, grid.grid_w * grid.patch_size_px)
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.apsf");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load_psf_stack(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn mismatched_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.apsf");
        let grid = small_grid();
        save_psf_stack(&path, &grid).unwrap();
        let sc_path = sidecar_path(&path);
        let text = std::fs::read_to_string(&sc_path).unwrap();
        std::fs::write(&sc_path, text.replace("\"grid_w\": 4", "\"grid_w\": 7")).unwrap();
        assert!(load_psf_stack(&path).is_err());
    }
}
