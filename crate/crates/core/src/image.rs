//! Image preprocessing: bilinear resize and per-channel normalisation.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImageError {
    #[error("image has an empty extent: {height}x{width}x{channels}")]
    Empty {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("pixel buffer holds {actual} values, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("normalisation needs {channels} means and variances, got {means} and {vars}")]
    Stats {
        channels: usize,
        means: usize,
        vars: usize,
    },
    #[error("variance must be positive, got {0}")]
    Variance(f64),
}

/// Interleaved `H×W×C` pixels before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(ImageError::Empty {
                height,
                width,
                channels,
            });
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(ImageError::Length {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.width + j) * self.channels + c]
    }
}

/// A square, normalised `side×side×C` pixel grid ready for the vision encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pixels: Tensor,
}

impl PixelGrid {
    /// Wraps an already-normalised `H×W×C` tensor.
    pub fn from_tensor(pixels: Tensor) -> Option<Self> {
        (pixels.rank() == 3).then_some(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    /// Copies the `size×size` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Option<PixelGrid> {
        if height == 0 || width == 0 || top + height > self.height() || left + width > self.width() {
            return None;
        }
        let c = self.channels();
        let src = self.pixels.data();
        let mut out = Vec::with_capacity(height * width * c);
        for i in top..top + height {
            let start = (i * self.width() + left) * c;
            out.extend_from_slice(&src[start..start + width * c]);
        }
        Tensor::new(vec![height, width, c], out).ok().map(|pixels| Self { pixels })
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &RawImage, out_h: usize, out_w: usize) -> RawImage {
    let c = img.channels;
    let mut data = vec![0.0; out_h * out_w * c];
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = libm::floor(src) as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    for i in 0..out_h {
        let (y0, y1, fy) = coord(i, sy, img.height);
        for j in 0..out_w {
            let (x0, x1, fx) = coord(j, sx, img.width);
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - fx) + img.at(y0, x1, ch) * fx;
                let bottom = img.at(y1, x0, ch) * (1.0 - fx) + img.at(y1, x1, ch) * fx;
                data[(i * out_w + j) * c + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    RawImage {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    }
}

/// Resizes to `side×side` and applies `(x − mean) / sqrt(var)` per channel.
pub fn preprocess_image(raw: &RawImage, side: usize, mean: &[f64], var: &[f64]) -> Result<PixelGrid, ImageError> {
    if raw.height == 0 || raw.width == 0 || raw.channels == 0 || raw.data.is_empty() || side == 0 {
        return Err(ImageError::Empty {
            height: raw.height,
            width: raw.width,
            channels: raw.channels,
        });
    }
    if mean.len() != raw.channels || var.len() != raw.channels {
        return Err(ImageError::Stats {
            channels: raw.channels,
            means: mean.len(),
            vars: var.len(),
        });
    }
    if let Some(&v) = var.iter().find(|&&v| !(v > 0.0)) {
        return Err(ImageError::Variance(v));
    }
    let mut resized = resize_bilinear(raw, side, side);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(*v)).collect();
    for px in resized.data.chunks_mut(raw.channels) {
        for ((v, m), s) in px.iter_mut().zip(mean).zip(&inv_std) {
            *v = (*v - m) * s;
        }
    }
    let pixels = Tensor::new(vec![side, side, raw.channels], resized.data).map_err(|_| ImageError::Length {
        expected: side * side * raw.channels,
        actual: 0,
    })?;
    Ok(PixelGrid { pixels })
}
