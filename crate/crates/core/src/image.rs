//! 8-bit RGB images and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    /// Row-major, interleaved RGB.
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::MalformedImage { path: None, reason: "zero-sized image".into() });
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::MalformedImage {
                path: None,
                reason: format!("{} bytes for a {width}x{height} RGB image", pixels.len()),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::MalformedImage { path: None, reason: reason.to_string() };
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(bad("missing P6 magic"));
        }
        let mut number = |what: &str| -> Result<usize> {
            token()?.parse::<usize>().map_err(|_| bad(&format!("invalid {what}")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval != 255 {
            return Err(bad("only 8-bit (maxval 255) images are supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let raster = pos + 1;
        let len = width * height * 3;
        if bytes.len() < raster + len {
            return Err(bad("truncated raster"));
        }
        Image::new(width, height, bytes[raster..raster + len].to_vec())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| match e {
            Error::MalformedImage { reason, .. } => {
                Error::MalformedImage { path: Some(path.to_path_buf()), reason }
            }
            other => other,
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    /// Checkerboard with `cell`-pixel squares alternating between two colors.
    pub fn checkerboard(width: usize, height: usize, cell: usize, a: [u8; 3], b: [u8; 3]) -> Self {
        let mut img = Self::filled(width, height, a);
        for y in 0..height {
            for x in 0..width {
                if (x / cell + y / cell) % 2 == 1 {
                    img.set(x, y, b);
                }
            }
        }
        img
    }
}

/// Float working copy of an image, interleaved RGB in `[0, 255]`.
#[derive(Debug, Clone)]
pub(crate) struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn from_image(img: &Image) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.pixels.iter().map(|&p| f32::from(p)).collect(),
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn to_image(&self) -> Image {
        let pixels = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        Image { width: self.width, height: self.height, pixels }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = Image::checkerboard(5, 3, 2, [10, 20, 30], [200, 100, 0]);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(Image::from_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(Image::from_ppm(&bytes).unwrap().get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn ppm_rejects_garbage() {
        assert!(Image::from_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(Image::from_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(Image::from_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(Image::from_ppm(b"P6\n").is_err());
    }

    #[test]
    fn double_flip_is_identity() {
        let img = Image::checkerboard(7, 4, 3, [1, 2, 3], [9, 8, 7]);
        assert_ne!(img.flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }
}
