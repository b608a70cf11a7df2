//! Planar float image buffer and file I/O.
//!
//! Pixel data is stored channel-planar (`[c][h][w]`) as `f32`, nominally in
//! `[0, 1]`. sRGB endpoints travel as 8/16-bit PNG; linear intermediates use
//! a raw planar float format (`.pfp`) with a PFM-style text header:
//!
//! ```text
//! PFP\n
//! <width> <height> <channels>\n
//! -1.0\n            (negative scale = little-endian, as in PFM)
//! <c*h*w little-endian f32, plane by plane, rows top-down>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Planar float image: `channels` planes of `height` x `width` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f32>,
}

/// Images in display (gamma-encoded) space.
pub type SrgbImage = ImageBuf;
/// Images in linear intensity space.
pub type LinearImage = ImageBuf;
/// Single-plane RGGB mosaic images.
pub type BayerImage = ImageBuf;

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self { height, width, channels, data: vec![0.0; height * width * channels] })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut img = Self::new(h, w, c)?;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.set(y, x, ch, f(y, x, ch));
                }
            }
        }
        Ok(img)
    }

    pub fn constant(h: usize, w: usize, c: usize, v: f32) -> Result<Self> {
        let mut img = Self::new(h, w, c)?;
        img.data.fill(v);
        Ok(img)
    }

    pub fn from_planar(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "planar buffer length {} does not match {h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Self { height: h, width: w, channels: c, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(ch * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(ch * self.height + y) * self.width + x] = v;
    }

    /// Borrow one channel plane as a contiguous `h*w` slice.
    pub fn plane(&self, ch: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn validate_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Shape("image contains non-finite samples".into()))
        }
    }

    /// Maximum absolute difference against another image of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max)
    }
}

/// Read an 8/16-bit PNG (gray or RGB) into a planar float image in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<ImageBuf> {
    let dynimg = image::open(path)?;
    Ok(match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let mut img = ImageBuf::new(h, w, 1)?;
            for (x, y, p) in g.enumerate_pixels() {
                img.set(y as usize, x as usize, 0, p.0[0] as f32 / 255.0);
            }
            img
        }
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let mut img = ImageBuf::new(h, w, 1)?;
            for (x, y, p) in g.enumerate_pixels() {
                img.set(y as usize, x as usize, 0, p.0[0] as f32 / 65535.0);
            }
            img
        }
        other => {
            if other.color().bits_per_pixel() > 8 * other.color().channel_count() as u16 {
                let rgb = other.to_rgb16();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut img = ImageBuf::new(h, w, 3)?;
                for (x, y, p) in rgb.enumerate_pixels() {
                    for ch in 0..3 {
                        img.set(y as usize, x as usize, ch, p.0[ch] as f32 / 65535.0);
                    }
                }
                img
            } else {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut img = ImageBuf::new(h, w, 3)?;
                for (x, y, p) in rgb.enumerate_pixels() {
                    for ch in 0..3 {
                        img.set(y as usize, x as usize, ch, p.0[ch] as f32 / 255.0);
                    }
                }
                img
            }
        }
    })
}

/// Write a planar float image as PNG, clamping to `[0, 1]`.
pub fn write_png(path: &Path, img: &ImageBuf, bit_depth: u8) -> Result<()> {
    let (h, w) = (img.height as u32, img.width as u32);
    let quant8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let quant16 = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    match (img.channels, bit_depth) {
        (1, 8) => {
            let buf: Vec<u8> = (0..img.height)
                .flat_map(|y| (0..img.width).map(move |x| (y, x)))
                .map(|(y, x)| quant8(img.get(y, x, 0)))
                .collect();
            image::GrayImage::from_raw(w, h, buf).unwrap().save(path)?;
        }
        (1, 16) => {
            let buf: Vec<u16> = (0..img.height)
                .flat_map(|y| (0..img.width).map(move |x| (y, x)))
                .map(|(y, x)| quant16(img.get(y, x, 0)))
                .collect();
            image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, buf)
                .unwrap()
                .save(path)?;
        }
        (3, 8) => {
            let mut buf = Vec::with_capacity(img.height * img.width * 3);
            for y in 0..img.height {
                for x in 0..img.width {
                    for ch in 0..3 {
                        buf.push(quant8(img.get(y, x, ch)));
                    }
                }
            }
            image::RgbImage::from_raw(w, h, buf).unwrap().save(path)?;
        }
        (3, 16) => {
            let mut buf = Vec::with_capacity(img.height * img.width * 3);
            for y in 0..img.height {
                for x in 0..img.width {
                    for ch in 0..3 {
                        buf.push(quant16(img.get(y, x, ch)));
                    }
                }
            }
            image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, buf)
                .unwrap()
                .save(path)?;
        }
        (c, d) => {
            return Err(Error::Config(format!(
                "unsupported PNG layout: {c} channels at {d} bits"
            )))
        }
    }
    Ok(())
}

/// Write the raw planar float format.
pub fn write_pfp(path: &Path, img: &ImageBuf) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "PFP\n{} {} {}\n-1.0\n", img.width, img.height, img.channels)?;
    for v in &img.data {
        f.write_f32::<LittleEndian>(*v)?;
    }
    Ok(())
}

/// Read the raw planar float format.
pub fn read_pfp(path: &Path) -> Result<ImageBuf> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    let mut newlines = 0;
    while newlines < 3 {
        let mut b = [0u8; 1];
        f.read_exact(&mut b)?;
        if b[0] == b'\n' {
            newlines += 1;
        }
        header.push(b[0]);
        if header.len() > 256 {
            return Err(Error::Parse("oversized PFP header".into()));
        }
    }
    let text = String::from_utf8(header).map_err(|_| Error::Parse("non-UTF8 PFP header".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some("PFP") {
        return Err(Error::Parse("not a PFP file (bad magic)".into()));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse("bad PFP dims".into())))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Parse("PFP dims line needs width height channels".into()));
    }
    let scale: f64 = lines
        .next()
        .unwrap_or("")
        .trim()
        .parse()
        .map_err(|_| Error::Parse("bad PFP scale".into()))?;
    if scale >= 0.0 {
        return Err(Error::Parse("big-endian PFP not supported".into()));
    }
    let (w, h, c) = (dims[0], dims[1], dims[2]);
    let mut data = vec![0f32; w * h * c];
    f.read_f32_into::<LittleEndian>(&mut data)?;
    ImageBuf::from_planar(h, w, c, data)
}

/// Read an image by extension: `.png` or `.pfp`.
pub fn read_auto(path: &Path) -> Result<ImageBuf> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfp") => read_pfp(path),
        _ => read_png(path),
    }
}

/// Write an image by extension: `.png` (given bit depth) or `.pfp`.
pub fn write_auto(path: &Path, img: &ImageBuf, bit_depth: u8) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfp") => write_pfp(path, img),
        _ => write_png(path, img, bit_depth),
    }
}

/// Probe (height, width) without decoding pixel data.
pub fn read_dims(path: &Path) -> Result<(usize, usize)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfp") => {
            let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
            let mut header = Vec::new();
            let mut newlines = 0;
            while newlines < 2 {
                let mut b = [0u8; 1];
                f.read_exact(&mut b)?;
                if b[0] == b'\n' {
                    newlines += 1;
                }
                header.push(b[0]);
                if header.len() > 256 {
                    return Err(Error::Parse("oversized PFP header".into()));
                }
            }
            let text =
                String::from_utf8(header).map_err(|_| Error::Parse("non-UTF8 PFP header".into()))?;
            let mut lines = text.lines();
            if lines.next() != Some("PFP") {
                return Err(Error::Parse("not a PFP file (bad magic)".into()));
            }
            let dims: Vec<usize> = lines
                .next()
                .unwrap_or("")
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse("bad PFP dims".into())))
                .collect::<Result<_>>()?;
            if dims.len() != 3 {
                return Err(Error::Parse("PFP dims line needs width height channels".into()));
            }
            Ok((dims[1], dims[0]))
        }
        _ => {
            let (w, h) = image::image_dimensions(path)?;
            Ok((h as usize, w as usize))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_8bit_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = ImageBuf::from_fn(6, 5, 3, |y, x, c| {
            ((y * 31 + x * 7 + c * 3) % 256) as f32 / 255.0
        })
        .unwrap();
        write_png(&path, &img, 8).unwrap();
        let back = read_png(&path).unwrap();
        assert!(img.max_abs_diff(&back) < 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn pfp_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfp");
        let img = ImageBuf::from_fn(4, 7, 3, |y, x, c| (y as f32 * 0.3 + x as f32 * 0.01 + c as f32).sin()).unwrap();
        write_pfp(&path, &img).unwrap();
        let back = read_pfp(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(ImageBuf::new(0, 4, 1).is_err());
    }
}
