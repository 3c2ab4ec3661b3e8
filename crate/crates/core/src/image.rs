//! RGB float images and the binary PPM/PGM formats used for frames and
//! debug renders.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed image file {path}: {message}")]
    Format { path: String, message: String },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Row-major interleaved RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Image {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// 8-bit binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<(), ImageError> {
        fs::write(path, self.to_ppm()).map_err(|e| io_err(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self, ImageError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Image::parse_ppm(&bytes).map_err(|message| ImageError::Format {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn parse_ppm(bytes: &[u8]) -> Result<Self, String> {
        let (header, offset) = parse_header(bytes, 4)?;
        if header[0] != "P6" {
            return Err(format!("expected P6, found {}", header[0]));
        }
        let (w, h, max) = dims(&header)?;
        if max != 255 {
            return Err("only 8-bit PPM is supported".into());
        }
        let body = &bytes[offset..];
        if body.len() < w * h * 3 {
            return Err("truncated pixel data".into());
        }
        let data = body[..w * h * 3]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Ok(Image::from_data(w, h, data))
    }
}

/// One video frame; `index` is 1-based and matches the prior bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: u32,
    pub image: Image,
}

/// 16-bit big-endian PGM (P5) of a scalar map, scaled so `max_value` maps to
/// 65535.
pub fn depth_to_pgm16(width: usize, height: usize, values: &[f64], max_value: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", width, height).into_bytes();
    let scale = if max_value > 0.0 { 65535.0 / max_value } else { 0.0 };
    for v in values {
        let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

fn parse_header(bytes: &[u8], fields: usize) -> Result<(Vec<String>, usize), String> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < fields {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        out.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((out, i + 1))
}

fn dims(header: &[String]) -> Result<(usize, usize, usize), String> {
    let p = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s}"));
    Ok((p(&header[1])?, p(&header[2])?, p(&header[3])?))
}

fn io_err(path: &Path, e: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_8bit_values() {
        let mut img = Image::new(3, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 13 % 256) as f64 / 255.0;
        }
        let back = Image::parse_ppm(&img.to_ppm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_header_and_length() {
        let bytes = depth_to_pgm16(2, 2, &[0.0, 1.0, 2.0, 4.0], 4.0);
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
        assert_eq!(bytes.len(), 13 + 8);
        assert_eq!(&bytes[bytes.len() - 2..], &[0xff, 0xff]);
    }

    #[test]
    fn rejects_wrong_magic() {
        assert!(Image::parse_ppm(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
    }
}
