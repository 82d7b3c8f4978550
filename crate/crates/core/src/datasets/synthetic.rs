//! Synthetic four-class dataset whose class signal lives in chosen Haar
//! subbands, on top of a patient-consistent low-frequency background.
//!
//! Textures are drawn directly in the wavelet domain: each class band gets
//! random coefficients shaped by a soft blob mask and is back-projected to
//! pixels, so a band planted at level `l` in direction `d` contributes to
//! exactly that subband of the analysis.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::io::{quantize, save_gray};
use crate::episodes::{DatasetManifest, ManifestItem};
use crate::error::{Error, Result};
use crate::wavelet::{self, Subband};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Lh,
    Hl,
    Hh,
}

impl Direction {
    pub fn subband(self) -> Subband {
        match self {
            Direction::Lh => Subband::Lh,
            Direction::Hl => Subband::Hl,
            Direction::Hh => Subband::Hh,
        }
    }
}

/// Texture in one subband; `amplitude` is the per-pixel standard deviation
/// before masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub level: usize,
    pub direction: Direction,
    pub amplitude: f64,
}

impl BandSpec {
    pub fn new(level: usize, direction: Direction, amplitude: f64) -> Self {
        Self {
            level,
            direction,
            amplitude,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub bands: Vec<BandSpec>,
    /// Blob radius as a fraction of the image side; `0` textures the whole
    /// image.
    #[serde(default)]
    pub blob_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticRecipe {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    /// Bands textured identically for every class.
    pub nuisance: Vec<BandSpec>,
    pub patients_per_class: usize,
    pub images_per_patient: usize,
    pub image_size: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub background_mean: f64,
    /// Half-width of the uniform per-patient brightness offset.
    pub background_jitter: f64,
    /// Standard deviation of the blocky low-frequency field.
    pub smooth_std: f64,
    /// Level whose LL band carries the low-frequency field.
    pub smooth_level: usize,
    /// Weight of the per-image part of the field relative to the patient part.
    pub image_jitter: f64,
    /// Relative spread of per-patient texture strength.
    pub patient_amplitude_jitter: f64,
}

fn class(name: &str, bands: Vec<BandSpec>, blob_radius: f64) -> ClassSpec {
    ClassSpec {
        name: name.to_string(),
        bands,
        blob_radius,
    }
}

impl Default for SyntheticRecipe {
    fn default() -> Self {
        use Direction::*;
        Self {
            name: "default".into(),
            classes: vec![
                class("class_i", vec![BandSpec::new(1, Hh, 0.15)], 0.5),
                class("class_ii", vec![BandSpec::new(1, Lh, 0.15)], 0.5),
                class("class_iii", vec![BandSpec::new(2, Hl, 0.15)], 0.5),
                class("class_iv", vec![BandSpec::new(2, Hh, 0.15)], 0.5),
            ],
            nuisance: Vec::new(),
            patients_per_class: 5,
            images_per_patient: 8,
            image_size: 32,
            seed: 7,
            noise_std: 0.02,
            background_mean: 0.5,
            background_jitter: 0.08,
            smooth_std: 0.06,
            smooth_level: 3,
            image_jitter: 0.3,
            patient_amplitude_jitter: 0.15,
        }
    }
}

impl SyntheticRecipe {
    /// Weak detail-band class textures under a strong, image-varying
    /// low-frequency field.
    pub fn frequency_discriminable() -> Self {
        use Direction::*;
        Self {
            name: "frequency".into(),
            classes: vec![
                class("class_i", vec![BandSpec::new(1, Hh, 0.08)], 0.5),
                class("class_ii", vec![BandSpec::new(1, Lh, 0.08)], 0.5),
                class("class_iii", vec![BandSpec::new(2, Hl, 0.08)], 0.5),
                class("class_iv", vec![BandSpec::new(2, Hh, 0.08)], 0.5),
            ],
            patients_per_class: 10,
            noise_std: 0.03,
            smooth_std: 0.12,
            image_jitter: 1.0,
            ..Self::default()
        }
    }

    /// Class textures only at level 3, with class-independent texture at
    /// levels 1 and 2 and a coarse low-frequency field.
    pub fn level3_planted() -> Self {
        use Direction::*;
        Self {
            name: "level3".into(),
            classes: vec![
                class("class_i", vec![BandSpec::new(3, Lh, 0.06)], 0.0),
                class("class_ii", vec![BandSpec::new(3, Hl, 0.06)], 0.0),
                class("class_iii", vec![BandSpec::new(3, Hh, 0.06)], 0.0),
                class(
                    "class_iv",
                    vec![BandSpec::new(3, Lh, 0.042), BandSpec::new(3, Hl, 0.042)],
                    0.0,
                ),
            ],
            nuisance: vec![
                BandSpec::new(1, Lh, 0.04),
                BandSpec::new(1, Hl, 0.04),
                BandSpec::new(1, Hh, 0.04),
                BandSpec::new(2, Lh, 0.04),
                BandSpec::new(2, Hl, 0.04),
                BandSpec::new(2, Hh, 0.04),
            ],
            patients_per_class: 10,
            smooth_std: 0.1,
            smooth_level: 4,
            image_jitter: 1.0,
            ..Self::default()
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "frequency" => Ok(Self::frequency_discriminable()),
            "level3" => Ok(Self::level3_planted()),
            other => Err(Error::Config(format!(
                "unknown recipe `{other}` (expected default, frequency or level3)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = 1usize << wavelet::MAX_LEVELS;
        if self.image_size == 0 || !self.image_size.is_multiple_of(levels) {
            return Err(Error::Config(format!(
                "synthetic image size must be a positive multiple of {levels}"
            )));
        }
        if self.classes.len() < 2 || self.patients_per_class == 0 || self.images_per_patient == 0 {
            return Err(Error::Config("recipe needs two classes and nonempty patients".into()));
        }
        wavelet::check_levels(self.smooth_level)?;
        for b in self.classes.iter().flat_map(|c| &c.bands).chain(&self.nuisance) {
            wavelet::check_levels(b.level)?;
        }
        Ok(())
    }

    pub fn num_items(&self) -> usize {
        self.classes.len() * self.patients_per_class * self.images_per_patient
    }
}

struct Patient {
    brightness: f64,
    field: Array2<f64>,
    center: (f64, f64),
    radius_scale: f64,
    amplitude: f64,
}

fn normal_grid<R: Rng>(rng: &mut R, n: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn band_texture<R: Rng>(
    rng: &mut R,
    band: &BandSpec,
    size: usize,
    mask: impl Fn(f64, f64) -> f64,
    gain: f64,
) -> Result<Array2<f64>> {
    let n = size >> band.level;
    let cell = (1usize << band.level) as f64;
    // Orthonormal synthesis spreads a coefficient over cell^2 pixels with
    // weight 1 / cell, so scaling by cell gives unit per-pixel spread.
    let coeffs = Array2::from_shape_fn((n, n), |(i, j)| {
        let z: f64 = StandardNormal.sample(rng);
        let m = mask((i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell);
        z * band.amplitude * gain * cell * m
    });
    wavelet::back_project(&coeffs, band.direction.subband(), band.level, (size, size))
}

fn smooth_field<R: Rng>(rng: &mut R, recipe: &SyntheticRecipe, std: f64) -> Result<Array2<f64>> {
    let size = recipe.image_size;
    let l = recipe.smooth_level;
    let cell = (1usize << l) as f64;
    let coeffs = normal_grid(rng, size >> l, std * cell);
    wavelet::back_project(&coeffs, Subband::Ll, l, (size, size))
}

/// Generates every image in memory, quantized to 8-bit levels, with
/// manifest rows pointing at `images/<class>/<patient>_<k>.png`.
pub fn generate_in_memory(recipe: &SyntheticRecipe) -> Result<Vec<(ManifestItem, Array2<f64>)>> {
    recipe.validate()?;
    let size = recipe.image_size;
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut out = Vec::with_capacity(recipe.num_items());
    for spec in &recipe.classes {
        for p in 0..recipe.patients_per_class {
            let patient_id = format!("{}_p{p:02}", spec.name);
            let patient = Patient {
                brightness: recipe.background_mean
                    + rng.gen_range(-1.0..=1.0) * recipe.background_jitter,
                field: smooth_field(&mut rng, recipe, recipe.smooth_std)?,
                center: (rng.gen_range(0.35..0.65) * s, rng.gen_range(0.35..0.65) * s),
                radius_scale: rng.gen_range(0.85..1.15),
                amplitude: 1.0 + rng.gen_range(-1.0..=1.0) * recipe.patient_amplitude_jitter,
            };
            for k in 0..recipe.images_per_patient {
                let cy = patient.center.0 + rng.gen_range(-1.5..=1.5);
                let cx = patient.center.1 + rng.gen_range(-1.5..=1.5);
                let radius = spec.blob_radius * s * patient.radius_scale;
                let mask = |y: f64, x: f64| {
                    if radius <= 0.0 {
                        return 1.0;
                    }
                    let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    1.0 / (1.0 + ((d - radius) / 1.5).exp())
                };
                let mut img = patient.field.clone() + patient.brightness;
                img += &(smooth_field(&mut rng, recipe, recipe.smooth_std)? * recipe.image_jitter);
                for band in &spec.bands {
                    img += &band_texture(&mut rng, band, size, mask, patient.amplitude)?;
                }
                for band in &recipe.nuisance {
                    img += &band_texture(&mut rng, band, size, |_, _| 1.0, 1.0)?;
                }
                img += &normal_grid(&mut rng, size, recipe.noise_std);
                let item_id = format!("{patient_id}_{k:02}");
                out.push((
                    ManifestItem {
                        relative_path: format!("images/{}/{item_id}.png", spec.name),
                        item_id,
                        class_label: spec.name.clone(),
                        patient_id: patient_id.clone(),
                        split: None,
                    },
                    quantize(&img),
                ));
            }
        }
    }
    Ok(out)
}

/// Writes the images under `root` and a `manifest.csv` next to them.
pub fn generate_synthetic(recipe: &SyntheticRecipe, root: &Path) -> Result<DatasetManifest> {
    let items = generate_in_memory(recipe)?;
    let mut manifest = DatasetManifest::default();
    for (item, img) in items {
        save_gray(&root.join(&item.relative_path), &img)?;
        manifest.items.push(item);
    }
    manifest.write(&root.join("manifest.csv"))?;
    Ok(manifest)
}
