//! Image buffers, portable pixmaps (P5/P6) and the raw float format.
//!
//! Raw format: two little-endian u32 dims (height, width) followed by
//! `height * width` little-endian f32 values, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Planar image: channel `c` occupies `data[c*h*w..(c+1)*h*w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let img = Self { height, width, channels, data };
        img.validate()?;
        Ok(img)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Format("image dimensions must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Format(format!("{} channels; expected 1 or 3", self.channels)));
        }
        let n = self.plane_len() * self.channels;
        if self.data.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: self.data.len() });
        }
        if let Some(j) = self.data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain(format!("pixel {j} = {} is not finite and nonnegative", self.data[j])));
        }
        Ok(())
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane_len();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn from_channels(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        Self::new(height, width, planes.len(), planes.concat())
    }
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated pixmap header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((tokens, pos + 1))
}

/// Decodes a binary PGM (P5) or PPM (P6) with 8- or 16-bit samples,
/// scaling values to `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let (tok, start) = header_tokens(bytes, 4)?;
    let channels = match tok[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported pixmap magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad header field {s}")));
    let (width, height, maxval) = (num(&tok[1])?, num(&tok[2])?, num(&tok[3])?);
    if maxval == 0 || maxval > 65535 || width == 0 || height == 0 {
        return Err(Error::Format(format!("bad pixmap header {width}x{height} max {maxval}")));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let count = width * height * channels;
    let raster = bytes.get(start..start + count * bps).ok_or_else(|| Error::Format("truncated pixmap raster".into()))?;
    let mut data = vec![0.0; count];
    let plane = width * height;
    for k in 0..count {
        let v = if bps == 1 { raster[k] as f64 } else { u16::from_be_bytes([raster[2 * k], raster[2 * k + 1]]) as f64 };
        // Interleaved on disk, planar in memory.
        data[(k % channels) * plane + k / channels] = v / maxval as f64;
    }
    ImageBuffer::new(height, width, channels, data)
}

/// Encodes with `bits` ∈ {8, 16}, mapping `[lo, hi]` onto the full range
/// and clamping outside it.
pub fn encode_pnm(img: &ImageBuffer, bits: u32, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let maxval: u32 = match bits {
        8 => 255,
        16 => 65535,
        b => return Err(Error::Format(format!("unsupported bit depth {b}"))),
    };
    if !(hi > lo) {
        return Err(Error::Domain(format!("empty display range [{lo}, {hi}]")));
    }
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("{c} channels cannot be written as a pixmap"))),
    };
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width, img.height).into_bytes();
    let plane = img.plane_len();
    for k in 0..plane * img.channels {
        let v = img.data[(k % img.channels) * plane + k / img.channels];
        let q = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if bits == 8 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    decode_pnm(&fs::read(path)?)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &ImageBuffer, bits: u32, lo: f64, hi: f64) -> Result<()> {
    fs::write(path, encode_pnm(img, bits, lo, hi)?)?;
    Ok(())
}

pub fn encode_raw_f32(height: usize, width: usize, data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != height * width {
        return Err(Error::LengthMismatch { expected: height * width, got: data.len() });
    }
    let dims = |v: usize| u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")));
    let mut out = Vec::with_capacity(8 + 4 * data.len());
    out.extend_from_slice(&dims(height)?.to_le_bytes());
    out.extend_from_slice(&dims(width)?.to_le_bytes());
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw_f32(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 8 {
        return Err(Error::Format("raw image shorter than its header".into()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(Error::Format(format!("raw image {h}x{w} needs {} bytes, found {}", 4 * h * w, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok((h, w, data))
}

pub fn write_raw_f32(path: impl AsRef<Path>, height: usize, width: usize, data: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_raw_f32(height, width, data)?)?;
    Ok(())
}

pub fn read_raw_f32(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    decode_raw_f32(&fs::read(path)?)
}

/// Loads a pixmap or, for a `.raw` extension, a raw float image.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "raw") {
        let (h, w, data) = read_raw_f32(path)?;
        ImageBuffer::new(h, w, 1, data)
    } else {
        read_pnm(path)
    }
}
