//! Intensity windowing, background cropping, resizing and training-time
//! augmentation.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessPolicy {
    pub window_level: f64,
    pub window_width: f64,
    /// Pixels at or below this fraction of the maximum count as background.
    pub background_fraction: f64,
    pub size: usize,
}

impl Default for PreprocessPolicy {
    fn default() -> Self {
        Self {
            window_level: 0.5,
            window_width: 1.0,
            background_fraction: 0.01,
            size: 32,
        }
    }
}

/// `clip((x - (level - width / 2)) / width, 0, 1)`.
pub fn window(image: &Array2<f64>, level: f64, width: f64) -> Result<Array2<f64>> {
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("window width must be positive, got {width}")));
    }
    let lo = level - width / 2.0;
    Ok(image.mapv(|x| ((x - lo) / width).clamp(0.0, 1.0)))
}

/// Tight bounding box of the pixels above `fraction * max`.
pub fn crop_background(image: &Array2<f64>, fraction: f64) -> Result<Array2<f64>> {
    let max = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if image.is_empty() || !(max > 0.0) {
        return Err(Error::EmptyImage);
    }
    let thresh = fraction * max;
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for ((r, c), &v) in image.indexed_iter() {
        if v > thresh {
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyImage);
    }
    Ok(image.slice(ndarray::s![r0..=r1, c0..=c1]).to_owned())
}

/// Bilinear (triangle filter) resize to `size x size`; a no-op when the
/// image already has that shape.
pub fn resize(image: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    if (h, w) == (size, size) {
        return image.clone();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([image[[y as usize, x as usize]] as f32]));
    let out = imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
    Array2::from_shape_fn((size, size), |(r, c)| (out.get_pixel(c as u32, r as u32)[0] as f64).clamp(0.0, 1.0))
}

pub fn preprocess(image: &Array2<f64>, policy: &PreprocessPolicy) -> Result<Array2<f64>> {
    if policy.size == 0 {
        return Err(Error::Config("preprocess size must be positive".into()));
    }
    let w = window(image, policy.window_level, policy.window_width)?;
    let c = crop_background(&w, policy.background_fraction)?;
    Ok(resize(&c, policy.size))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub enabled: bool,
    /// Smallest side fraction kept by the random resized crop.
    pub crop_scale_min: f64,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_scale_min: 0.85,
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

pub fn hflip(image: &Array2<f64>) -> Array2<f64> {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(1));
    out
}

fn bilinear(image: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = image.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = image[[y0, x0]] * (1.0 - fx) + image[[y0, x1]] * fx;
    let bottom = image[[y1, x0]] * (1.0 - fx) + image[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Random resized crop, horizontal flip and small rotation, composed into a
/// single inverse mapping with bilinear sampling and edge clamping.
pub fn augment<R: Rng>(image: &Array2<f64>, rng: &mut R, policy: &AugmentPolicy) -> Array2<f64> {
    if !policy.enabled || image.is_empty() {
        return image.clone();
    }
    let scale = if policy.crop_scale_min < 1.0 {
        rng.gen_range(policy.crop_scale_min.max(0.1)..=1.0)
    } else {
        1.0
    };
    let slack = (1.0 - scale) / 2.0;
    let (ty, tx) = if slack > 0.0 {
        (rng.gen_range(-slack..=slack), rng.gen_range(-slack..=slack))
    } else {
        (0.0, 0.0)
    };
    let flip = rng.gen_bool(policy.flip_prob.clamp(0.0, 1.0));
    let theta = if policy.max_rotation_deg > 0.0 {
        rng.gen_range(-policy.max_rotation_deg..=policy.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let (h, w) = image.dim();
    let (sin, cos) = theta.sin_cos();
    Array2::from_shape_fn((h, w), |(r, c)| {
        // centred unit coordinates of the output pixel
        let v = (r as f64 + 0.5) / h as f64 - 0.5;
        let mut u = (c as f64 + 0.5) / w as f64 - 0.5;
        if flip {
            u = -u;
        }
        let ur = cos * u - sin * v;
        let vr = sin * u + cos * v;
        let sx = (ur * scale + tx + 0.5) * w as f64 - 0.5;
        let sy = (vr * scale + ty + 0.5) * h as f64 - 0.5;
        bilinear(image, sy, sx)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(r, c)| 0.1 + (r * w + c) as f64 / (h * w) as f64 * 0.8)
    }

    #[test]
    fn full_window_is_identity_on_unit_range() {
        let img = ramp(6, 6);
        assert_eq!(window(&img, 0.5, 1.0).unwrap(), img);
        assert!(window(&img, 0.5, 0.0).is_err());
    }

    #[test]
    fn narrow_window_formula() {
        let img = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64 / 15.0);
        let out = window(&img, 0.5, 0.5).unwrap();
        for (x, y) in img.iter().zip(out.iter()) {
            assert_abs_diff_eq!(*y, ((x - 0.25) / 0.5).clamp(0.0, 1.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_border_is_cropped_exactly() {
        let inner = ramp(5, 3);
        let mut img = Array2::zeros((9, 8));
        img.slice_mut(ndarray::s![2..7, 4..7]).assign(&inner);
        assert_eq!(crop_background(&img, 0.01).unwrap(), inner);
        assert!(matches!(crop_background(&Array2::zeros((3, 3)), 0.01), Err(Error::EmptyImage)));
    }

    #[test]
    fn preprocess_is_idempotent_on_clean_input() {
        let policy = PreprocessPolicy { size: 8, ..Default::default() };
        let img = ramp(8, 8);
        let once = preprocess(&img, &policy).unwrap();
        assert_eq!(once, img);
        assert_eq!(preprocess(&once, &policy).unwrap(), once);
    }

    #[test]
    fn preprocess_resizes_into_unit_range() {
        let policy = PreprocessPolicy { size: 16, ..Default::default() };
        let mut img = Array2::zeros((40, 30));
        img.slice_mut(ndarray::s![5..35, 5..25]).fill(0.7);
        let out = preprocess(&img, &policy).unwrap();
        assert_eq!(out.dim(), (16, 16));
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = ramp(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &mut rng, &AugmentPolicy::disabled()), img);
        let none = AugmentPolicy { enabled: true, crop_scale_min: 1.0, flip_prob: 0.0, max_rotation_deg: 0.0 };
        let out = augment(&img, &mut rng, &none);
        for (a, b) in out.iter().zip(img.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(5, 7);
        assert_eq!(hflip(&hflip(&img)), img);
        let always = AugmentPolicy { enabled: true, crop_scale_min: 1.0, flip_prob: 1.0, max_rotation_deg: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, &mut rng, &always);
        for (a, b) in out.iter().zip(hflip(&img).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_bounded() {
        let img = ramp(16, 16);
        let p = AugmentPolicy::default();
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(3), &p);
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(3), &p);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
