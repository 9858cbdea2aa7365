//! RGB images with channel-interleaved `f32` samples in `[0, 1]`.

use crate::error::{Result, WwtError};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, RGB interleaved.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(WwtError::shape("image", &[height, width, 3], &[data.len()]));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Quantize to 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Copy with every sample multiplied by the per-pixel weight.
    pub fn masked(&self, weights: &[f32]) -> Result<Image> {
        if weights.len() != self.width * self.height {
            return Err(WwtError::shape(
                "masked",
                &[self.height, self.width],
                &[weights.len()],
            ));
        }
        let mut out = self.clone();
        for (p, w) in weights.iter().enumerate() {
            for c in 0..3 {
                out.data[p * 3 + c] *= w;
            }
        }
        Ok(out)
    }
}
