//! Image loading and model-input preparation.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;

use crate::bundle::Preprocess;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An image resized to the model resolution, in two forms: RGB in `[0, 1]`
/// (for superpixels) and channel-normalized (for the network).
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub rgb: Tensor,
    pub input: Tensor,
    pub orig_h: usize,
    pub orig_w: usize,
}

impl PreparedImage {
    pub fn height(&self) -> usize {
        self.rgb.dim(1)
    }

    pub fn width(&self) -> usize {
        self.rgb.dim(2)
    }

    /// Original-pixels-per-model-pixel along each axis.
    pub fn scales(&self) -> (f64, f64) {
        (
            self.orig_h as f64 / self.height() as f64,
            self.orig_w as f64 / self.width() as f64,
        )
    }
}

/// Read an 8-bit RGB image (binary PPM or PNG).
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Per-channel `(x - mean) / std`.
pub fn normalize_channels(rgb: &Tensor, pre: &Preprocess) -> Tensor {
    let plane = rgb.dim(1) * rgb.dim(2);
    Tensor::from_fn(rgb.shape().to_vec(), |i| {
        let c = i / plane;
        (rgb.data()[i] - pre.mean[c]) / pre.std[c]
    })
}

/// Resize the whole image (aspect ratio not preserved) to
/// `resolution x resolution` with bicubic filtering and normalize.
pub fn prepare(img: &RgbImage, resolution: usize, pre: &Preprocess) -> Result<PreparedImage> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Parameter("empty image".into()));
    }
    let (orig_h, orig_w) = (img.height() as usize, img.width() as usize);
    let resized = if (orig_h, orig_w) == (resolution, resolution) {
        img.clone()
    } else {
        image::imageops::resize(img, resolution as u32, resolution as u32, FilterType::CatmullRom)
    };
    let rgb = rgb_to_tensor(&resized);
    let input = normalize_channels(&rgb, pre);
    Ok(PreparedImage {
        rgb,
        input,
        orig_h,
        orig_w,
    })
}

/// Write an 8-bit binary PPM.
pub fn save_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.as_raw());
    std::fs::write(path, out)?;
    Ok(())
}
