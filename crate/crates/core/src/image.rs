//! Channels-first RGB images with `f64` values in `[0, 1]`, plus lossless
//! PNG round-tripping. Generated pixel values are always multiples of 1/255
//! so the on-disk PNG is an exact representation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image shape: {0}")]
    InvalidShape(String),
    #[error("png error: {0}")]
    Png(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub const CHANNELS: usize = 3;

/// An RGB image stored as `[channel][y][x]` in a flat `Vec<f64>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Vec<f64>,
    h: usize,
    w: usize,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: vec![0.0; CHANNELS * h * w],
            h,
            w,
        }
    }

    pub fn filled(h: usize, w: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::zeros(h, w);
        for c in 0..CHANNELS {
            for i in 0..h * w {
                img.data[c * h * w + i] = rgb[c];
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Snaps every value to the nearest multiple of 1/255 and clamps to
    /// `[0, 1]`, the representable set of an 8-bit PNG.
    pub fn quantize_u8(&mut self) {
        for v in &mut self.data {
            let q = (v.clamp(0.0, 1.0) * 255.0).round();
            *v = q / 255.0;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let file = File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| ImageError::Png(e.to_string()))?;
        let mut buf = vec![0u8; self.h * self.w * CHANNELS];
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..CHANNELS {
                    let v = (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                    buf[(y * self.w + x) * CHANNELS + c] = v;
                }
            }
        }
        writer
            .write_image_data(&buf)
            .map_err(|e| ImageError::Png(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let file = File::open(path)?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| ImageError::Png(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| ImageError::Png(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::InvalidShape(format!(
                "expected 8-bit RGB png, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut img = Image::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let v = buf[(y * w + x) * CHANNELS + c] as f64 / 255.0;
                    img.set(c, y, x, v);
                }
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_after_quantization() {
        let mut img = Image::zeros(16, 16);
        for (i, v) in img.as_mut_slice().iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        img.quantize_u8();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(img, back);
    }
}
