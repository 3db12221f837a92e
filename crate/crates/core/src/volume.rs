//! Dense real-valued video volumes and binary foreground masks.

use crate::error::{AvError, Result};
use crate::scalar::Scalar;

/// Dense volume of shape frames x channels x height x width, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

/// Latent feature volume (z_t), N x C' x h x w.
pub type LatentVideo<T> = Volume<T>;

/// Pixel-space video, N x C x H x W with entries in [0, 1].
pub type PixelVideo<T> = Volume<T>;

impl<T: Scalar> Volume<T> {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Volume {
            frames,
            channels,
            height,
            width,
            data: vec![T::zero(); frames * channels * height * width],
        }
    }

    pub fn from_vec(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != frames * channels * height * width {
            return Err(AvError::invalid(format!(
                "volume data length {} does not match shape {}x{}x{}x{}",
                data.len(),
                frames,
                channels,
                height,
                width
            )));
        }
        Ok(Volume {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, f: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(f, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(f, c, y, x);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume {
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise a*self + b*other.
    pub fn lincomb(&self, a: T, other: &Self, b: T) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(AvError::invalid("volume shape mismatch in lincomb"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Volume {
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| a * v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| (x - y).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }

    pub fn mean_abs_diff(&self, other: &Self) -> T {
        let n = T::from_usize(self.data.len()).unwrap();
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / n
    }
}

/// Per-frame binary foreground mask at pixel resolution. 1 = foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// true = foreground
    pub data: Vec<bool>,
}

impl ForegroundMask {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(AvError::invalid("mask data length does not match shape"));
        }
        Ok(ForegroundMask {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        ForegroundMask {
            frames,
            height,
            width,
            data: vec![false; frames * height * width],
        }
    }

    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.data[(f * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, f: usize, y: usize, x: usize, v: bool) {
        self.data[(f * self.height + y) * self.width + x] = v;
    }

    /// Nearest-neighbor downsample to a layer resolution, re-binarized.
    pub fn downsample(&self, height: usize, width: usize) -> Result<ForegroundMask> {
        if height == 0 || width == 0 || height > self.height || width > self.width {
            return Err(AvError::invalid(format!(
                "mask downsample target {}x{} invalid for {}x{}",
                height, width, self.height, self.width
            )));
        }
        let mut out = ForegroundMask::zeros(self.frames, height, width);
        for f in 0..self.frames {
            for y in 0..height {
                let sy = y * self.height / height;
                for x in 0..width {
                    let sx = x * self.width / width;
                    out.set(f, y, x, self.get(f, sy, sx));
                }
            }
        }
        Ok(out)
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_indexing_round_trip() {
        let mut v: Volume<f64> = Volume::zeros(2, 3, 4, 5);
        v.set(1, 2, 3, 4, 7.5);
        assert_eq!(v.get(1, 2, 3, 4), 7.5);
        assert_eq!(v.data[v.len() - 1], 7.5);
    }

    #[test]
    fn mask_downsample_nearest() {
        let mut m = ForegroundMask::zeros(1, 4, 4);
        // foreground in the top-left 2x2 quadrant
        for y in 0..2 {
            for x in 0..2 {
                m.set(0, y, x, true);
            }
        }
        let d = m.downsample(2, 2).unwrap();
        assert!(d.get(0, 0, 0));
        assert!(!d.get(0, 0, 1));
        assert!(!d.get(0, 1, 0));
        assert!(!d.get(0, 1, 1));
    }

    #[test]
    fn mask_downsample_rejects_upsample() {
        let m = ForegroundMask::zeros(1, 4, 4);
        assert!(m.downsample(8, 8).is_err());
    }
}
