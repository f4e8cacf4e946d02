use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};
use ndarray::{Array2, Array3};

use super::{Image, InstanceMask};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extensions treated as raster files, lowercase.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["tif", "tiff", "png"];

/// Raster files directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Storage precision for written rasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

impl TryFrom<u32> for BitDepth {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::InvalidArgument(format!("bit depth must be 8 or 16, got {other}"))),
        }
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn planes<T: Scalar, P: Copy + Into<f64>>(
    raw: &[P],
    h: usize,
    w: usize,
    stride: usize,
    keep: usize,
    max: f64,
) -> Array3<T> {
    Array3::from_shape_fn((h, w, keep), |(y, x, c)| {
        T::of(raw[(y * w + x) * stride + c].into() / max)
    })
}

/// Loads an 8- or 16-bit grayscale or RGB raster scaled to `[0, 1]`.
///
/// Alpha channels are dropped. Floating point rasters are rejected.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match &img {
        DynamicImage::ImageLuma8(b) => planes(b.as_raw(), h, w, 1, 1, 255.0),
        DynamicImage::ImageLumaA8(b) => planes(b.as_raw(), h, w, 2, 1, 255.0),
        DynamicImage::ImageRgb8(b) => planes(b.as_raw(), h, w, 3, 3, 255.0),
        DynamicImage::ImageRgba8(b) => planes(b.as_raw(), h, w, 4, 3, 255.0),
        DynamicImage::ImageLuma16(b) => planes(b.as_raw(), h, w, 1, 1, 65535.0),
        DynamicImage::ImageLumaA16(b) => planes(b.as_raw(), h, w, 2, 1, 65535.0),
        DynamicImage::ImageRgb16(b) => planes(b.as_raw(), h, w, 3, 3, 65535.0),
        DynamicImage::ImageRgba16(b) => planes(b.as_raw(), h, w, 4, 3, 65535.0),
        other => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                detail: format!("{:?}", other.color()),
            })
        }
    };
    Ok(Image::new(pixels)?.with_source(path))
}

fn quantize<T: Scalar>(v: T, max: f64) -> f64 {
    (v.as_f64().clamp(0.0, 1.0) * max).round()
}

fn write(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Write {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    img.save(path).map_err(|e| Error::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes an image, format chosen by extension (`.png`, `.tif`, `.tiff`).
pub fn save_image<T: Scalar>(image: &Image<T>, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.dims();
    let px = image.pixels();
    let max = depth.max_value();
    let flat: Vec<f64> = px.iter().map(|&v| quantize(v, max)).collect();
    let (w32, h32) = (w as u32, h as u32);
    let dynamic = match (image.channels(), depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, flat.iter().map(|&v| v as u8).collect())
                .expect("buffer size matches dims"),
        ),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w32, h32, flat.iter().map(|&v| v as u16).collect())
                .expect("buffer size matches dims"),
        ),
        (_, BitDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, flat.iter().map(|&v| v as u8).collect())
                .expect("buffer size matches dims"),
        ),
        (_, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w32, h32, flat.iter().map(|&v| v as u16).collect())
                .expect("buffer size matches dims"),
        ),
    };
    write(dynamic, path)
}

/// Loads a single-channel integer label raster.
pub fn load_mask(path: impl AsRef<Path>) -> Result<InstanceMask> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = match &img {
        DynamicImage::ImageLuma8(b) => {
            Array2::from_shape_fn((h, w), |(y, x)| b.as_raw()[y * w + x] as u32)
        }
        DynamicImage::ImageLuma16(b) => {
            Array2::from_shape_fn((h, w), |(y, x)| b.as_raw()[y * w + x] as u32)
        }
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            return Err(Error::NonIntegerMask {
                path: path.to_path_buf(),
                detail: format!("{:?}", img.color()),
            })
        }
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("expected a single-channel label raster, found {:?}", other.color()),
            })
        }
    };
    InstanceMask::new(labels)
}

/// Writes a mask as a 16-bit single-channel label raster.
pub fn save_mask(mask: &InstanceMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.dims();
    if let Some(&too_big) = mask.labels().iter().find(|&&l| l > u16::MAX as u32) {
        return Err(Error::InvalidArgument(format!(
            "label {too_big} does not fit a 16-bit label raster"
        )));
    }
    let raw: Vec<u16> = mask.labels().iter().map(|&l| l as u16).collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches dims");
    write(DynamicImage::ImageLuma16(buf), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn eight_bit_constant_255_loads_as_one() {
        let dir = tmp();
        let p = dir.path().join("w.png");
        ImageBuffer::<Luma<u8>, _>::from_pixel(5, 4, Luma([255u8])).save(&p).unwrap();
        let img: Image<f64> = load_image(&p).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.dims(), (4, 5));
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sixteen_bit_zero_loads_as_zero() {
        let dir = tmp();
        let p = dir.path().join("z.tif");
        ImageBuffer::<Luma<u16>, _>::from_pixel(3, 3, Luma([0u16])).save(&p).unwrap();
        let img: Image<f32> = load_image(&p).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eight_bit_128_scales_by_255() {
        let dir = tmp();
        let p = dir.path().join("g.png");
        ImageBuffer::<Luma<u8>, _>::from_pixel(2, 2, Luma([128u8])).save(&p).unwrap();
        let img: Image<f64> = load_image(&p).unwrap();
        assert!((img.pixels()[[0, 0, 0]] - 0.50196).abs() < 1e-5);
        assert_eq!(img.pixels()[[1, 1, 0]], 128.0 / 255.0);
    }

    #[test]
    fn rgb_is_kept_as_three_channels() {
        let dir = tmp();
        let p = dir.path().join("c.png");
        ImageBuffer::<Rgb<u8>, _>::from_pixel(2, 3, Rgb([255u8, 0, 51])).save(&p).unwrap();
        let img: Image<f64> = load_image(&p).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.pixels()[[2, 1, 2]], 0.2);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tmp();
        let missing = load_image::<f64>(dir.path().join("nope.png")).unwrap_err();
        assert!(matches!(missing, Error::MissingFile(_)));

        let garbage = dir.path().join("bad.png");
        std::fs::write(&garbage, b"definitely not a png").unwrap();
        let undecodable = load_image::<f64>(&garbage).unwrap_err();
        assert!(matches!(undecodable, Error::Decode { .. }), "{undecodable:?}");

        let float = dir.path().join("f.tif");
        DynamicImage::ImageRgb32F(ImageBuffer::from_pixel(2, 2, Rgb([0.5f32, 0.5, 0.5])))
            .save(&float)
            .unwrap();
        let depth = load_image::<f64>(&float).unwrap_err();
        assert!(matches!(depth, Error::UnsupportedBitDepth { .. }), "{depth:?}");
        let mask = load_mask(&float).unwrap_err();
        assert!(matches!(mask, Error::NonIntegerMask { .. }), "{mask:?}");
    }

    #[test]
    fn save_extremes_round_trip_exactly() {
        let dir = tmp();
        let zeros = Image::<f64>::filled(4, 4, 1, 0.0).unwrap();
        save_image(&zeros, dir.path().join("z.png"), BitDepth::Eight).unwrap();
        assert_eq!(load_image::<f64>(dir.path().join("z.png")).unwrap().pixels(), zeros.pixels());

        let ones = Image::<f64>::filled(4, 4, 3, 1.0).unwrap();
        save_image(&ones, dir.path().join("o.tif"), BitDepth::Sixteen).unwrap();
        assert_eq!(load_image::<f64>(dir.path().join("o.tif")).unwrap().pixels(), ones.pixels());
    }

    #[test]
    fn unwritable_path_is_reported() {
        let dir = tmp();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let img = Image::<f64>::filled(2, 2, 1, 0.5).unwrap();
        let err = save_image(&img, blocker.join("sub").join("a.png"), BitDepth::Eight).unwrap_err();
        assert!(matches!(err, Error::Write { .. }));
    }

    #[test]
    fn masks_keep_sparse_labels() {
        let dir = tmp();
        let labels = ndarray::array![[0u32, 3, 3], [7, 0, 3], [7, 7, 0]];
        let mask = InstanceMask::new(labels.clone()).unwrap();
        let p = dir.path().join("m.tif");
        save_mask(&mask, &p).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(back.labels(), &labels);
        assert_eq!(back.instance_ids(), vec![3, 7]);

        let empty = InstanceMask::empty(4, 4).unwrap();
        save_mask(&empty, dir.path().join("e.png")).unwrap();
        assert_eq!(load_mask(dir.path().join("e.png")).unwrap().instance_count(), 0);
    }

    #[test]
    fn rgb_mask_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("rgb.png");
        ImageBuffer::<Rgb<u8>, _>::from_pixel(2, 2, Rgb([1u8, 2, 3])).save(&p).unwrap();
        assert!(matches!(load_mask(&p), Err(Error::Decode { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn image_round_trip_within_quantization(
                vals in proptest::collection::vec(0.0f64..=1.0, 6 * 5 * 3),
                sixteen in any::<bool>(),
                rgb in any::<bool>(),
            ) {
                let c = if rgb { 3 } else { 1 };
                let px = Array3::from_shape_vec((6, 5, c), vals[..30 * c].to_vec()).unwrap();
                let img = Image::new(px).unwrap();
                let depth = if sixteen { BitDepth::Sixteen } else { BitDepth::Eight };
                let dir = tmp();
                let p = dir.path().join("r.tif");
                save_image(&img, &p, depth).unwrap();
                let back: Image<f64> = load_image(&p).unwrap();
                let tol = 1.0 / depth.max_value();
                for (a, b) in img.pixels().iter().zip(back.pixels().iter()) {
                    prop_assert!((a - b).abs() <= tol);
                }
            }

            #[test]
            fn mask_round_trip_is_exact(labels in proptest::collection::vec(0u32..=65535, 7 * 4)) {
                let mask = InstanceMask::new(Array2::from_shape_vec((7, 4), labels).unwrap()).unwrap();
                let dir = tmp();
                let p = dir.path().join("m.tif");
                save_mask(&mask, &p).unwrap();
                prop_assert_eq!(load_mask(&p).unwrap(), mask);
            }
        }
    }
}
