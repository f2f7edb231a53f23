//! Decoded images and their normalized model-input form.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;

use crate::scalar::Scalar;

const MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Normalized `height x width x 3` pixels, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![T::zero(); height * width * 3] }
    }

    /// Resizes (bilinear) to `size x size` if needed, then per-channel standardizes.
    pub fn from_rgb(img: &RgbImage, size: usize) -> Self {
        let resized;
        let src = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
            &resized
        };
        Self::from_rgb_exact(src)
    }

    /// Standardizes without resizing.
    pub fn from_rgb_exact(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Vec::with_capacity(w * h * 3);
        for px in img.pixels() {
            for c in 0..3 {
                data.push(T::of((f64::from(px[c]) / 255.0 - MEAN[c]) / STD[c]));
            }
        }
        Self { height: h, width: w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * 3 + c]
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, image::ImageError> {
    Ok(image::open(path)?.to_rgb8())
}
