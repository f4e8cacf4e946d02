//! Images, instance masks, raster I/O, resampling and connected components.

mod components;
mod io;
mod resample;

use std::path::PathBuf;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use components::{connected_components, instance_stats, Connectivity, InstanceStats};
pub use io::{list_images, load_image, load_mask, save_image, save_mask, BitDepth, IMAGE_EXTENSIONS};
pub use resample::{
    center_crop_or_reflect_pad, rescale_image, rescale_mask, resize_image, resize_mask,
    Interpolation,
};

/// A 2D raster with values in `[0, 1]`, stored as `H x W x C` with `C` in `{1, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pixels: Array3<T>,
    source: Option<PathBuf>,
}

impl<T: Scalar> Image<T> {
    /// Wraps a pixel array after checking the shape and value range.
    pub fn new(pixels: Array3<T>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!("image must be non-empty, got {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::ShapeMismatch(format!("image must have 1 or 3 channels, got {c}")));
        }
        if let Some(bad) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { pixels, source: None })
    }

    /// Clamps every value into `[0, 1]` (non-finite values become 0) and wraps.
    pub fn from_unclamped(mut pixels: Array3<T>) -> Result<Self> {
        pixels.mapv_inplace(|v| {
            if v.is_finite() {
                v.max(T::zero()).min(T::one())
            } else {
                T::zero()
            }
        });
        Self::new(pixels)
    }

    pub fn from_gray(gray: Array2<T>) -> Result<Self> {
        Self::new(gray.insert_axis(Axis(2)))
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn with_source(mut self, path: impl Into<PathBuf>) -> Self {
        self.source = Some(path.into());
        self
    }

    pub fn source(&self) -> Option<&std::path::Path> {
        self.source.as_deref()
    }

    pub fn pixels(&self) -> &Array3<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<T> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Single-channel view; RGB is reduced with Rec. 601 luma weights.
    pub fn luminance(&self) -> Array2<T> {
        if self.channels() == 1 {
            return self.pixels.index_axis(Axis(2), 0).to_owned();
        }
        let (wr, wg, wb) = (T::of(0.299), T::of(0.587), T::of(0.114));
        Array2::from_shape_fn(self.dims(), |(y, x)| {
            wr * self.pixels[[y, x, 0]] + wg * self.pixels[[y, x, 1]] + wb * self.pixels[[y, x, 2]]
        })
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            pixels: self.pixels.mapv(|v| U::of(v.as_f64())),
            source: self.source.clone(),
        }
    }
}

/// Integer label map: 0 is background, every positive label one cell instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    labels: Array2<u32>,
}

impl InstanceMask {
    pub fn new(labels: Array2<u32>) -> Result<Self> {
        let (h, w) = labels.dim();
        if h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!("mask must be non-empty, got {h}x{w}")));
        }
        Ok(Self { labels })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn into_labels(self) -> Array2<u32> {
        self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Sorted distinct positive labels.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ids().len()
    }

    pub fn foreground(&self) -> Array2<bool> {
        self.labels.mapv(|l| l > 0)
    }
}
