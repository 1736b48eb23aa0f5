//! Dense interleaved image buffers and binary masks.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height × width × channels` buffer of `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, value: &[f32]) -> Self {
        let mut data = Vec::with_capacity(height * width * value.len());
        for _ in 0..height * width {
            data.extend_from_slice(value);
        }
        Image {
            height,
            width,
            channels: value.len(),
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image buffer has {} samples, expected {height}×{width}×{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, v: f32) {
        self.data[(row * self.width + col) * self.channels + channel] = v;
    }

    /// Copies one channel into a contiguous plane.
    pub fn plane(&self, channel: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn set_plane(&mut self, channel: usize, plane: &[f32]) {
        assert_eq!(plane.len(), self.height * self.width);
        for (px, &v) in self.data.chunks_exact_mut(self.channels).zip(plane) {
            px[channel] = v;
        }
    }

    /// Writes the first three channels as a binary PPM (P6), clamped to [0,1].
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.channels < 3 {
            return Err(Error::invalid("ppm output needs at least 3 channels"));
        }
        let mut out = Vec::with_capacity(32 + self.height * self.width * 3);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        for px in self.data.chunks_exact(self.channels) {
            for &v in &px[..3] {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask has {} entries, expected {height}×{width}",
                bits.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resample to a new grid.
    pub fn resample_nearest(&self, height: usize, width: usize) -> Mask {
        let mut out = Mask::new(height, width);
        if self.height == 0 || self.width == 0 {
            return out;
        }
        for r in 0..height {
            let sr = ((r as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for c in 0..width {
                let sc = ((c as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.set(r, c, self.get(sr.min(self.height - 1), sc.min(self.width - 1)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_round_trip() {
        let mut img = Image::zeros(2, 3, 2);
        img.set_plane(1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(img.plane(1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(img.plane(0), vec![0.0; 6]);
        assert_eq!(img.get(1, 2, 1), 6.0);
    }

    #[test]
    fn ppm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        Image::filled(2, 4, &[1.0, 0.0, 0.5]).write_ppm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n4 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 2 * 4 * 3);
        assert_eq!(&bytes[11..14], &[255, 0, 128]);
    }

    #[test]
    fn nearest_resample_halves() {
        let mut m = Mask::new(4, 4);
        m.set(1, 1, true);
        m.set(3, 3, true);
        let small = m.resample_nearest(2, 2);
        // Each output cell samples the lower-right of its 2×2 source block.
        assert_eq!(small.bits(), &[true, false, false, true]);
        let same = m.resample_nearest(4, 4);
        assert_eq!(same, m);
    }
}
