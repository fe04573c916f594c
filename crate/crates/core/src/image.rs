//! Render targets and their on-disk encodings.
//!
//! RGB is written as binary PPM (P6, 8 bit, `round(255 * clamp(c, 0, 1))`).
//! Float planes use the GSDP container: the ASCII magic `GSDP`, then
//! little-endian `u32` width, height, channel count, then row-major
//! little-endian `f32` samples with channels interleaved.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GSDP_MAGIC: &[u8; 4] = b"GSDP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3`, row-major, premultiplied over black.
    pub rgb: Vec<f64>,
    /// Alpha-weighted depth normalized by accumulated alpha; 0 where empty.
    pub depth: Vec<f64>,
    /// Accumulated opacity `1 - T`.
    pub alpha: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        ImageBuffer {
            width,
            height,
            rgb: vec![0.0; n * 3],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
        }
    }

    /// An observed RGB-D frame (alpha unknown, set to 1).
    pub fn from_rgbd(width: usize, height: usize, rgb: Vec<f64>, depth: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if rgb.len() != n * 3 || depth.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} pixels, got {} rgb samples and {} depth samples",
                rgb.len(),
                depth.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            rgb,
            depth,
            alpha: vec![1.0; n],
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn rgb_at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// RGB quantized exactly as the PPM writer does.
    pub fn rgb8(&self) -> Vec<u8> {
        self.rgb.iter().map(|c| quantize(*c)).collect()
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_ppm(path, self.width, self.height, &self.rgb)
    }

    pub fn write_depth(&self, path: impl AsRef<Path>) -> Result<()> {
        write_gsdp(path, self.width, self.height, 1, &self.depth)
    }

    pub fn write_alpha(&self, path: impl AsRef<Path>) -> Result<()> {
        write_gsdp(path, self.width, self.height, 1, &self.alpha)
    }
}

pub fn quantize(c: f64) -> u8 {
    (255.0 * c.clamp(0.0, 1.0)).round() as u8
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[f64]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|c| quantize(*c)));
    out
}

pub fn write_ppm(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "rgb buffer has {} samples for {width}x{height}",
            rgb.len()
        )));
    }
    fs::write(path, encode_ppm(width, height, rgb))?;
    Ok(())
}

/// Reads a binary P6 PPM with maxval 255; returns `(width, height, rgb in [0,1])`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_ppm(&bytes).map_err(|msg| Error::parse(path, msg))
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
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
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("unsupported PPM magic {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    let n = w * h * 3;
    if bytes.len() < pos + n {
        return Err(format!("raster truncated: need {n} bytes"));
    }
    let rgb = bytes[pos..pos + n].iter().map(|b| *b as f64 / 255.0).collect();
    Ok((w, h, rgb))
}

pub fn encode_gsdp(width: usize, height: usize, channels: usize, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + data.len() * 4);
    out.extend_from_slice(GSDP_MAGIC);
    for v in [width, height, channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_gsdp(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    channels: usize,
    data: &[f64],
) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::Shape(format!(
            "plane has {} samples for {width}x{height}x{channels}",
            data.len()
        )));
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_gsdp(width, height, channels, data))?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatPlane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub fn read_gsdp(path: impl AsRef<Path>) -> Result<FloatPlane> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_gsdp(&bytes).map_err(|msg| Error::parse(path, msg))
}

pub fn decode_gsdp(bytes: &[u8]) -> std::result::Result<FloatPlane, String> {
    if bytes.len() < 16 || &bytes[..4] != GSDP_MAGIC {
        return Err("missing GSDP header".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (word(4), word(8), word(12));
    let n = width * height * channels;
    if bytes.len() != 16 + 4 * n {
        return Err(format!(
            "payload is {} bytes, header declares {n} samples",
            bytes.len() - 16
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(FloatPlane {
        width,
        height,
        channels,
        data,
    })
}
