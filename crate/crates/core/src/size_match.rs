//! Cell-size matching: mean cell lengths, their ratio, and the geometric
//! preparation of target images.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    center_crop_or_reflect_pad, connected_components, instance_stats, load_mask, rescale_image, save_image, BitDepth,
    Connectivity, Image, InstanceMask, Interpolation,
};
use crate::scalar::Scalar;

/// Produces instance masks for images that have no annotation.
pub trait Detector<T: Scalar>: Send + Sync {
    fn id(&self) -> String;

    fn detect(&self, image: &Image<T>) -> Result<InstanceMask>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    Otsu,
    Fixed(f64),
}

/// Histogram bins used by [`otsu_threshold`].
pub const OTSU_BINS: usize = 256;

/// Otsu's threshold over `values` in `[0, 1]`, using [`OTSU_BINS`] bins.
///
/// Pixels `>= threshold` are foreground. The threshold sits on the upper
/// edge of the last background bin. Without two populated classes the
/// result is `+inf`, so nothing counts as foreground.
pub fn otsu_threshold(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut hist = [0u64; OTSU_BINS];
    let mut total = 0u64;
    for v in values {
        let b = ((v.clamp(0.0, 1.0) * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1);
        hist[b] += 1;
        total += 1;
    }
    let centre = |b: usize| (b as f64 + 0.5) / OTSU_BINS as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(b, &c)| c as f64 * centre(b)).sum();
    let (mut w0, mut sum0) = (0u64, 0.0);
    let mut best = (0.0, None);
    for (k, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c;
        sum0 += c as f64 * centre(k);
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1).powi(2);
        if between > best.0 {
            best = (between, Some(k));
        }
    }
    match best.1 {
        Some(k) => (k + 1) as f64 / OTSU_BINS as f64,
        None => f64::INFINITY,
    }
}

/// Global threshold on luminance, then 8-connected components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NaiveDetector {
    pub threshold: Threshold,
    /// Components smaller than this are dropped.
    pub min_area: usize,
}

impl Default for NaiveDetector {
    fn default() -> Self {
        Self {
            threshold: Threshold::Otsu,
            min_area: 1,
        }
    }
}

pub fn naive_detector<T: Scalar>(image: &Image<T>, threshold: Threshold) -> InstanceMask {
    let lum = image.luminance().mapv(|v| v.as_f64());
    let t = match threshold {
        Threshold::Otsu => otsu_threshold(lum.iter().copied()),
        Threshold::Fixed(t) => t,
    };
    connected_components(&lum.mapv(|v| v >= t), Connectivity::Eight)
}

impl<T: Scalar> Detector<T> for NaiveDetector {
    fn id(&self) -> String {
        match self.threshold {
            Threshold::Otsu => "naive-otsu".into(),
            Threshold::Fixed(t) => format!("naive-fixed:{t}"),
        }
    }

    fn detect(&self, image: &Image<T>) -> Result<InstanceMask> {
        let mask = naive_detector(image, self.threshold);
        if self.min_area <= 1 {
            return Ok(mask);
        }
        let small: Vec<u32> = instance_stats(&mask)
            .into_iter()
            .filter(|s| s.area < self.min_area)
            .map(|s| s.label)
            .collect();
        let keep = mask.labels().mapv(|l| l > 0 && !small.contains(&l));
        Ok(connected_components(&keep, Connectivity::Eight))
    }
}

/// Runs `program [args..] <input image> <output mask>`; a non-zero exit
/// status is a detector failure. The input is written as a 16-bit TIFF and
/// the output must be a label raster of the same size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandDetector {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl<T: Scalar> Detector<T> for CommandDetector {
    fn id(&self) -> String {
        format!("command:{}", self.program.display())
    }

    fn detect(&self, image: &Image<T>) -> Result<InstanceMask> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("input.tif");
        let output = dir.path().join("mask.tif");
        save_image(image, &input, BitDepth::Sixteen)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&input)
            .arg(&output)
            .output()
            .map_err(|e| Error::Detector(format!("cannot run {}: {e}", self.program.display())))?;
        if !status.status.success() {
            return Err(Error::Detector(format!(
                "{} exited with {}: {}",
                self.program.display(),
                status.status,
                String::from_utf8_lossy(&status.stderr).trim()
            )));
        }
        let mask = load_mask(&output).map_err(|e| Error::Detector(format!("unreadable detector output: {e}")))?;
        if mask.dims() != image.dims() {
            return Err(Error::Detector(format!(
                "detector mask {:?} does not match image {:?}",
                mask.dims(),
                image.dims()
            )));
        }
        Ok(mask)
    }
}

/// Mean equivalent diameter over every instance of every mask, and the
/// number of instances.
pub fn average_cell_length(masks: &[InstanceMask]) -> Result<(f64, usize)> {
    let diameters: Vec<f64> = masks
        .iter()
        .flat_map(|m| instance_stats(m).into_iter().map(|s| s.equivalent_diameter))
        .collect();
    if diameters.is_empty() {
        return Err(Error::NoCells(format!("{} masks contain no instances", masks.len())));
    }
    Ok((diameters.iter().sum::<f64>() / diameters.len() as f64, diameters.len()))
}

/// Which length goes on top of the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioDirection {
    /// `r = source / target`: targets are scaled so their cells match the source.
    #[default]
    SourceOverTarget,
    TargetOverSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRatio {
    pub r: f64,
    pub mean_len_src: f64,
    pub mean_len_tgt: f64,
    pub n_src_instances: usize,
    pub n_tgt_instances: usize,
    #[serde(default)]
    pub direction: RatioDirection,
}

impl SizeRatio {
    /// The neutral ratio, used when size matching is switched off.
    pub fn identity() -> Self {
        Self {
            r: 1.0,
            mean_len_src: 1.0,
            mean_len_tgt: 1.0,
            n_src_instances: 0,
            n_tgt_instances: 0,
            direction: RatioDirection::SourceOverTarget,
        }
    }
}

pub fn compute_size_ratio(src_masks: &[InstanceMask], tgt_masks: &[InstanceMask]) -> Result<SizeRatio> {
    compute_size_ratio_with(src_masks, tgt_masks, RatioDirection::SourceOverTarget)
}

pub fn compute_size_ratio_with(
    src_masks: &[InstanceMask],
    tgt_masks: &[InstanceMask],
    direction: RatioDirection,
) -> Result<SizeRatio> {
    let side = |masks: &[InstanceMask], name: &str| {
        average_cell_length(masks).map_err(|e| match e {
            Error::NoCells(m) => Error::NoCells(format!("{name}: {m}")),
            e => e,
        })
    };
    let (src, n_src) = side(src_masks, "source")?;
    let (tgt, n_tgt) = side(tgt_masks, "target")?;
    let r = match direction {
        RatioDirection::SourceOverTarget => src / tgt,
        RatioDirection::TargetOverSource => tgt / src,
    };
    Ok(SizeRatio {
        r,
        mean_len_src: src,
        mean_len_tgt: tgt,
        n_src_instances: n_src,
        n_tgt_instances: n_tgt,
        direction,
    })
}

/// Runs `detector` over target images and compares against source masks.
pub fn size_ratio_from_images<T: Scalar>(
    src_masks: &[InstanceMask],
    tgt_images: &[Image<T>],
    detector: &dyn Detector<T>,
    direction: RatioDirection,
) -> Result<SizeRatio> {
    let tgt_masks = tgt_images.iter().map(|im| detector.detect(im)).collect::<Result<Vec<_>>>()?;
    compute_size_ratio_with(src_masks, &tgt_masks, direction)
}

/// Rescales a target image by `r` (bilinear) and brings it to
/// `working_size` by centre-cropping or reflect-padding each axis.
pub fn prepare_target<T: Scalar>(image: &Image<T>, r: f64, working_size: (usize, usize)) -> Result<Image<T>> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument(format!("size ratio must be positive, got {r}")));
    }
    let scaled = if r == 1.0 {
        image.clone()
    } else {
        rescale_image(image, r, Interpolation::Bilinear)?
    };
    center_crop_or_reflect_pad(&scaled, working_size)
}

/// Path of the mask paired with an image when only a directory is known.
pub fn sibling_mask_path(image: &Path, mask_dir: &Path) -> PathBuf {
    mask_dir.join(image.file_name().unwrap_or_default())
}
