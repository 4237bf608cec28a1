//! Patch codec between token grids and RGB images, plus binary PPM I/O.
//!
//! A codeword of dimension `3 p^2` is exactly one `p x p` RGB patch: vector
//! index `(py * p + px) * 3 + ch` is pixel `(py, px)` channel `ch`. Decoding
//! is a reshape and encoding is patch-wise nearest-codeword search, so
//! `encode(decode(grid)) == grid` for any grid.

use std::io::Write;
use std::path::Path;

use crate::codebook::Codebook;
use crate::error::{invalid, Error, Result};
use crate::tokens::TokenGrid;

/// Row-major, channel-interleaved RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return invalid(format!("expected {} values for {height}x{width}x3, got {}", height * width * 3, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.width + x) * 3 + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[self.index(y, x, ch)]
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Copies the `p x p` patch at patch coordinates (`row`, `col`) into `out`
    /// in codeword order.
    pub fn read_patch(&self, row: usize, col: usize, p: usize, out: &mut [f32]) {
        for py in 0..p {
            let start = self.index(row * p + py, col * p, 0);
            out[py * p * 3..(py + 1) * p * 3].copy_from_slice(&self.data[start..start + p * 3]);
        }
    }

    /// All patches of the image in raster order, flattened.
    pub fn patches(&self, p: usize) -> Result<Vec<f32>> {
        let (rows, cols) = patch_grid_dims(self, p)?;
        let dim = 3 * p * p;
        let mut out = vec![0.0; rows * cols * dim];
        for r in 0..rows {
            for c in 0..cols {
                let at = (r * cols + c) * dim;
                self.read_patch(r, c, p, &mut out[at..at + dim]);
            }
        }
        Ok(out)
    }
}

pub fn patch_grid_dims(image: &Image, p: usize) -> Result<(usize, usize)> {
    if p == 0 || !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) || image.height == 0 || image.width == 0 {
        return invalid(format!(
            "image {}x{} is not divisible into {p}x{p} patches",
            image.height, image.width
        ));
    }
    Ok((image.height / p, image.width / p))
}

pub fn decode(grid: &TokenGrid, codebook: &Codebook) -> Result<Image> {
    grid.check_vocab(codebook.vocab_size())?;
    let p = codebook.patch_size();
    let mut image = Image::filled(grid.h * p, grid.w * p, [0.0; 3]);
    for row in 0..grid.h {
        for col in 0..grid.w {
            let vector = codebook.vector(grid.get(row, col));
            for py in 0..p {
                let start = image.index(row * p + py, col * p, 0);
                for (dst, src) in image.data[start..start + p * 3].iter_mut().zip(&vector[py * p * 3..]) {
                    *dst = src.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(image)
}

pub fn encode(image: &Image, codebook: &Codebook) -> Result<TokenGrid> {
    let p = codebook.patch_size();
    let (rows, cols) = patch_grid_dims(image, p)?;
    let mut patch = vec![0.0f32; codebook.dim()];
    let mut tokens = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            image.read_patch(row, col, p, &mut patch);
            tokens.push(codebook.nearest(&patch));
        }
    }
    TokenGrid::new(rows, cols, tokens)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn ppm_bytes(image: &Image) -> Vec<u8> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(image.data.iter().map(|&v| to_byte(v)));
    bytes
}

/// The image as it reads back after a PPM round trip.
pub fn quantize_8bit(image: &Image) -> Image {
    let data = image.data.iter().map(|&v| to_byte(v) as f32 / 255.0).collect();
    Image { height: image.height, width: image.width, data }
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII PPM header".into()))?);
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("unsupported PPM magic {:?}", fields[0])));
    }
    let number = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field {s:?}")));
    let (width, height, maxval) = (number(fields[1])?, number(fields[2])?, number(fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing separator after PPM header".into()));
    }
    let payload = &bytes[pos + 1..];
    let expected = width * height * 3;
    if payload.len() < expected {
        return Err(Error::Format(format!("truncated PPM payload: {} of {expected} bytes", payload.len())));
    }
    let data = payload[..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, data)
}

pub fn write_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&ppm_bytes(image))?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    parse_ppm(&std::fs::read(path)?)
}
