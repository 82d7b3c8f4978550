use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Loads an image as grayscale intensities in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0
    }))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes intensities (clipped to `[0, 1]`) as an 8-bit grayscale PNG.
pub fn save_gray(path: &Path, image: &Array2<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (h, w) = image.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(image[[y as usize, x as usize]])]));
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Rounds intensities to the 8-bit levels a PNG round trip would give.
pub fn quantize(image: &Array2<f64>) -> Array2<f64> {
    image.mapv(|v| to_u8(v) as f64 / 255.0)
}
