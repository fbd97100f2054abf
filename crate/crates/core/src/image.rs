//! Grayscale images, binary PGM I/O, and patch extraction.

use std::path::Path;

use rrg_autodiff::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a binary PGM image: {reason}")]
    Format { path: String, reason: String },
    #[error("image is {width}x{height}, expected {expected}x{expected}")]
    WrongSize {
        width: usize,
        height: usize,
        expected: usize,
    },
    #[error("image {width}x{height} is not divisible into {patch}x{patch} patches")]
    Indivisible {
        width: usize,
        height: usize,
        patch: usize,
    },
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Rounds intensities to the 8-bit grid used on disk.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| to_byte(p) as f64 / 255.0).collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| to_byte(p)));
        out
    }

    pub fn from_pgm(bytes: &[u8], path: &str) -> Result<Self, ImageError> {
        let fail = |reason: &str| ImageError::Format {
            path: path.to_string(),
            reason: reason.to_string(),
        };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(fail("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("non-ASCII header"))?);
        }
        if fields[0] != "P5" {
            return Err(fail("missing P5 magic"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| fail("bad header number"));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
            return Err(fail("unsupported dimensions or maxval"));
        }
        pos += 1;
        let body = bytes.get(pos..pos + width * height).ok_or_else(|| fail("truncated pixel data"))?;
        Ok(Self {
            width,
            height,
            pixels: body.iter().map(|&b| b as f64 / maxval as f64).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.to_pgm()).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_pgm(path: &Path) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_pgm(&bytes, &path.display().to_string())
    }

    pub fn check_size(&self, expected: usize) -> Result<(), ImageError> {
        if self.width != expected || self.height != expected {
            return Err(ImageError::WrongSize {
                width: self.width,
                height: self.height,
                expected,
            });
        }
        Ok(())
    }

    /// `N×P²` matrix of flattened patches, patches in row-major grid order
    /// and pixels row-major within each patch.
    pub fn patches(&self, patch: usize) -> Result<Tensor, ImageError> {
        if patch == 0 || self.width % patch != 0 || self.height % patch != 0 {
            return Err(ImageError::Indivisible {
                width: self.width,
                height: self.height,
                patch,
            });
        }
        let (gw, gh) = (self.width / patch, self.height / patch);
        let mut data = Vec::with_capacity(self.pixels.len());
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let row = (py * patch + y) * self.width + px * patch;
                    data.extend_from_slice(&self.pixels[row..row + patch]);
                }
            }
        }
        Ok(Tensor::new(&[gw * gh, patch * patch], data).expect("finite pixels"))
    }
}

fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}
