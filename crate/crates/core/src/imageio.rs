//! Image files to and from `[0, 1]` tensors.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensor::Tensor;

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.into(),
        source,
    }
}

/// Reads any PNG/PPM as RGB, `[1, 3, H, W]` with values in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c].clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

/// Round-to-nearest 8-bit quantization of a `[0, 1]` value.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes sample `n` of a 3-channel tensor as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, t: &Tensor, n: usize) -> Result<()> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        return Err(Error::shape(format!("RGB output needs 3 channels, got {c}")));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = quantize(t.plane(n, ch)[i]);
        }
    }
    img.save(path).map_err(image_err(path))
}

/// Writes channel 0 of sample `n` as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, t: &Tensor, n: usize) -> Result<()> {
    let [_, _, h, w] = t.shape();
    let px = t.plane(n, 0).iter().map(|&v| quantize(v)).collect();
    GrayImage::from_raw(w as u32, h as u32, px)
        .expect("buffer sized to dims")
        .save(path)
        .map_err(image_err(path))
}

/// Reads a grayscale mask; values above half range count as foreground.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(image_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| u8::from(v > 127)).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| u8::from(v > 32767)).collect(),
        other => {
            return Err(Error::format(
                "mask",
                format!("{}: expected grayscale, found {:?}", path.display(), other.color()),
            ))
        }
    };
    Mask::new(h, w, data)
}

/// Writes a mask as 8-bit PNG with 0 and 255.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let px = mask.data().iter().map(|&v| v * 255).collect();
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, px)
        .expect("buffer sized to dims")
        .save(path)
        .map_err(image_err(path))
}
