//! Manifest plus preprocessed images held in memory, index-aligned.

use ndarray::Array2;
use rayon::prelude::*;

use crate::datasets::{load_gray, preprocess, PreprocessPolicy};
use crate::episodes::{split_by_patient, DatasetManifest, ManifestItem};
use crate::error::{Error, Result};

use super::config::DataConfig;

#[derive(Clone, Debug)]
pub struct LoadedData {
    pub manifest: DatasetManifest,
    /// `images[i]` belongs to `manifest.items[i]`.
    pub images: Vec<Array2<f64>>,
}

impl LoadedData {
    /// Assigns patient-level splits when any item lacks one.
    pub fn new(manifest: DatasetManifest, images: Vec<Array2<f64>>, cfg: &DataConfig) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(Error::InvalidArgument(format!(
                "{} manifest items but {} images",
                manifest.len(),
                images.len()
            )));
        }
        manifest.check_patient_exclusive()?;
        let manifest = if manifest.items.iter().any(|i| i.split.is_none()) {
            split_by_patient(&manifest, cfg.ratios()?, cfg.split_seed)?
        } else {
            manifest
        };
        Ok(Self { manifest, images })
    }

    pub fn from_pairs(pairs: Vec<(ManifestItem, Array2<f64>)>, cfg: &DataConfig) -> Result<Self> {
        let (items, images) = pairs.into_iter().unzip();
        Self::new(DatasetManifest::new(items), images, cfg)
    }

    /// Reads the manifest and every image, then preprocesses.
    pub fn load(cfg: &DataConfig, policy: &PreprocessPolicy) -> Result<Self> {
        let manifest = DatasetManifest::read(&cfg.manifest)?;
        let root = cfg.image_root();
        let images = manifest
            .items
            .par_iter()
            .map(|item| preprocess(&load_gray(&root.join(&item.relative_path))?, policy))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, images, cfg)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
