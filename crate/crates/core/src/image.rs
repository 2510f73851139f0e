//! Image containers shared across the pipeline.

pub use image::RgbImage;

use crate::error::{Error, Result};

/// Three-channel real-valued image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image3 {
    width: u32,
    height: u32,
    data: Vec<[f64; 3]>,
}

impl Image3 {
    pub fn new(width: u32, height: u32, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "pixel buffer of length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_rgb8(image: &RgbImage, f: impl Fn([u8; 3]) -> [f64; 3]) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
            data: image.pixels().map(|p| f(p.0)).collect(),
        }
    }

    pub fn from_rgb(image: &RgbImage, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let data = image
            .pixels()
            .map(|p| f([p[0] as f64, p[1] as f64, p[2] as f64]))
            .collect();
        Self {
            width: image.width(),
            height: image.height(),
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Values of one channel in pixel order.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[c]).collect()
    }

    /// Rounds and clamps every channel into an 8-bit RGB image.
    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for (dst, src) in out.pixels_mut().zip(&self.data) {
            for c in 0..3 {
                dst[c] = src[c].round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}
