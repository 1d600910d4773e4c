//! PNG-backed image loading and saving.
//!
//! Arrays are `(channels, height, width)` with values in `[0, 1]`.
//! Loading resizes to the requested geometry; saving quantizes to 8-bit.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::Array3;
use thiserror::Error;

use crate::scalar::{fp, lossy, Scalar};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("unsupported channel count {channels}; use 1 (gray) or 3 (rgb)")]
    BadChannelCount { channels: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
}

/// Loads a PNG (or any format the decoder knows), resizes it to
/// `(width, height)`, and normalizes to `[0, 1]`.
pub fn load_image<F: Scalar>(
    path: &Path,
    channels: usize,
    size: (usize, usize),
) -> Result<Array3<F>, ImageIoError> {
    let opened = image::open(path).map_err(|source| ImageIoError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let (width, height) = size;
    let resized = opened.resize_exact(width as u32, height as u32, FilterType::Triangle);
    let scale = fp::<F>(1.0 / 255.0);
    match channels {
        1 => {
            let gray = resized.to_luma8();
            Ok(Array3::from_shape_fn([1, height, width], |(_, y, x)| {
                fp::<F>(gray.get_pixel(x as u32, y as u32).0[0] as f64) * scale
            }))
        }
        3 => {
            let rgb = resized.to_rgb8();
            Ok(Array3::from_shape_fn([3, height, width], |(c, y, x)| {
                fp::<F>(rgb.get_pixel(x as u32, y as u32).0[c] as f64) * scale
            }))
        }
        other => Err(ImageIoError::BadChannelCount { channels: other }),
    }
}

/// Saves an array as an 8-bit PNG, clamping values into `[0, 1]` first.
pub fn save_image<F: Scalar>(path: &Path, image: &Array3<F>) -> Result<(), ImageIoError> {
    let shape = image.shape();
    let (channels, height, width) = (shape[0], shape[1], shape[2]);
    let quantize = |x: F| -> u8 {
        let v = lossy(x).clamp(0.0, 1.0);
        (v * 255.0).round() as u8
    };
    let dynamic = match channels {
        1 => {
            let mut out = GrayImage::new(width as u32, height as u32);
            for ((_, y, x), &v) in image.indexed_iter() {
                out.get_pixel_mut(x as u32, y as u32).0 = [quantize(v)];
            }
            DynamicImage::ImageLuma8(out)
        }
        3 => {
            let mut out = RgbImage::new(width as u32, height as u32);
            for y in 0..height {
                for x in 0..width {
                    let px = [
                        quantize(image[[0, y, x]]),
                        quantize(image[[1, y, x]]),
                        quantize(image[[2, y, x]]),
                    ];
                    out.get_pixel_mut(x as u32, y as u32).0 = px;
                }
            }
            DynamicImage::ImageRgb8(out)
        }
        other => return Err(ImageIoError::BadChannelCount { channels: other }),
    };
    dynamic.save(path).map_err(|source| ImageIoError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Peak signal-to-noise ratio in dB over unit-range images; identical
/// inputs score infinity.
pub fn psnr<F: Scalar>(a: &Array3<F>, b: &Array3<F>) -> Result<f64, ImageIoError> {
    if a.shape() != b.shape() {
        return Err(ImageIoError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = lossy(x) - lossy(y);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}
