use ndarray::{Array2, Array3};

use super::{Image, InstanceMask};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    /// Reserved for label maps.
    Nearest,
    Bilinear,
}

fn scaled_dims(h: usize, w: usize, factor: f64) -> Result<(usize, usize)> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!("scale factor must be positive, got {factor}")));
    }
    let nh = (h as f64 * factor).round() as usize;
    let nw = (w as f64 * factor).round() as usize;
    if nh == 0 || nw == 0 {
        return Err(Error::InvalidArgument(format!(
            "scaling {h}x{w} by {factor} yields an empty image"
        )));
    }
    Ok((nh, nw))
}

/// Half-pixel-centred source coordinate for output index `i`.
fn source_coord(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) * scale - 0.5
}

fn nearest_index(i: usize, scale: f64, len: usize) -> usize {
    (((i as f64 + 0.5) * scale).floor() as usize).min(len - 1)
}

/// Resamples to an explicit output size.
pub fn resize_image<T: Scalar>(
    image: &Image<T>,
    height: usize,
    width: usize,
    interpolation: Interpolation,
) -> Result<Image<T>> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("output dimensions must be positive".into()));
    }
    let (h, w) = image.dims();
    let c = image.channels();
    let px = image.pixels();
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let out = match interpolation {
        Interpolation::Nearest => Array3::from_shape_fn((height, width, c), |(y, x, ch)| {
            px[[nearest_index(y, sy, h), nearest_index(x, sx, w), ch]]
        }),
        Interpolation::Bilinear => {
            let axis = |n_out: usize, scale: f64, len: usize| -> Vec<(usize, usize, T)> {
                (0..n_out)
                    .map(|i| {
                        let s = source_coord(i, scale).clamp(0.0, (len - 1) as f64);
                        let i0 = s.floor() as usize;
                        let i1 = (i0 + 1).min(len - 1);
                        (i0, i1, T::of(s - i0 as f64))
                    })
                    .collect()
            };
            let ys = axis(height, sy, h);
            let xs = axis(width, sx, w);
            // Lerp as `a + t (b - a)` so constant regions stay bit-exact.
            Array3::from_shape_fn((height, width, c), |(y, x, ch)| {
                let (y0, y1, ty) = ys[y];
                let (x0, x1, tx) = xs[x];
                let top = px[[y0, x0, ch]] + tx * (px[[y0, x1, ch]] - px[[y0, x0, ch]]);
                let bot = px[[y1, x0, ch]] + tx * (px[[y1, x1, ch]] - px[[y1, x0, ch]]);
                top + ty * (bot - top)
            })
        }
    };
    Image::from_unclamped(out)
}

/// Scales both dimensions by `factor`; output is `round(H f) x round(W f)`.
pub fn rescale_image<T: Scalar>(
    image: &Image<T>,
    factor: f64,
    interpolation: Interpolation,
) -> Result<Image<T>> {
    let (h, w) = scaled_dims(image.height(), image.width(), factor)?;
    resize_image(image, h, w, interpolation)
}

/// Nearest-neighbour resize of a label map.
pub fn resize_mask(mask: &InstanceMask, height: usize, width: usize) -> Result<InstanceMask> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("output dimensions must be positive".into()));
    }
    let (h, w) = mask.dims();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let l = mask.labels();
    InstanceMask::new(Array2::from_shape_fn((height, width), |(y, x)| {
        l[[nearest_index(y, sy, h), nearest_index(x, sx, w)]]
    }))
}

pub fn rescale_mask(mask: &InstanceMask, factor: f64) -> Result<InstanceMask> {
    let (h, w) = scaled_dims(mask.dims().0, mask.dims().1, factor)?;
    resize_mask(mask, h, w)
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Per axis: centre-crops when the image is larger than the target and
/// reflect-pads when it is smaller.
pub fn center_crop_or_reflect_pad<T: Scalar>(
    image: &Image<T>,
    size: (usize, usize),
) -> Result<Image<T>> {
    let (th, tw) = size;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument("working size must be positive".into()));
    }
    let (h, w) = image.dims();
    let offset = |len: usize, target: usize| -> isize {
        if len >= target {
            ((len - target) / 2) as isize
        } else {
            -(((target - len) / 2) as isize)
        }
    };
    let (oy, ox) = (offset(h, th), offset(w, tw));
    let px = image.pixels();
    let out = Array3::from_shape_fn((th, tw, image.channels()), |(y, x, c)| {
        px[[reflect(y as isize + oy, h), reflect(x as isize + ox, w), c]]
    });
    Ok(Image::new(out)?.with_source_opt(image.source()))
}

impl<T: Scalar> Image<T> {
    fn with_source_opt(self, source: Option<&std::path::Path>) -> Self {
        match source {
            Some(p) => self.with_source(p),
            None => self,
        }
    }
}
