//! Datasets, manifests and on-disk formats.

mod pgm;
mod synthetic;
mod tensor_file;

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use tensor_file::{decode_tensor, encode_tensor, load_tensor, save_tensor, MAGIC};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_FILE: &str = "dataset.json";

/// One image and its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 x in_channels x h x w`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `1 x 1 x h x w`, integer labels stored as floats.
    pub mask: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: String,
    pub mask: String,
}

/// Contents of `dataset.json`. Sample paths are relative to the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub in_channels: usize,
    pub h: usize,
    pub w: usize,
    pub samples: Vec<SampleEntry>,
}

/// A validated manifest with its samples loaded in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    /// Stacks the selected samples into `(images, masks)` batches.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let images: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let masks: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].mask).collect();
        Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: DatasetManifest {
                samples: indices
                    .iter()
                    .map(|&i| self.manifest.samples[i].clone())
                    .collect(),
                ..self.manifest.clone()
            },
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Per-label pixel counts over all masks.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.manifest.num_classes];
        for s in &self.samples {
            for &l in s.mask.data() {
                hist[l as usize] += 1;
            }
        }
        hist
    }
}

/// Writes samples as tensor files plus `dataset.json` under `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    samples: &[Sample],
    manifest: &DatasetManifest,
) -> Result<()> {
    let dir = dir.as_ref();
    if samples.len() != manifest.samples.len() {
        return Err(Error::Dataset(format!(
            "{} samples but {} manifest entries",
            samples.len(),
            manifest.samples.len()
        )));
    }
    for (sample, entry) in samples.iter().zip(&manifest.samples) {
        for (rel, tensor) in [(&entry.image, &sample.image), (&entry.mask, &sample.mask)] {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_tensor(&path, tensor)?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Accepts either a dataset directory or the path of its `dataset.json`.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Reads and fully validates a manifest: every referenced file must exist,
/// parse, have the declared shape, and masks must hold labels below
/// `num_classes`.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    Ok(load_dataset(path)?.manifest)
}

/// [`load_manifest`] that also keeps the loaded samples.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = manifest_path(path.as_ref());
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let image_shape = Shape::new(1, manifest.in_channels, manifest.h, manifest.w);
    let mask_shape = Shape::new(1, 1, manifest.h, manifest.w);
    if manifest.samples.is_empty() {
        return Err(Error::Dataset(format!(
            "{} lists no samples",
            path.display()
        )));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let load = |rel: &str, want: Shape| -> Result<Tensor<f32>> {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::Dataset(format!("missing file {}", p.display())));
            }
            let t = load_tensor(&p)?;
            if t.shape() != want {
                return Err(Error::Dataset(format!(
                    "{} has shape {}, manifest implies {want}",
                    p.display(),
                    t.shape()
                )));
            }
            Ok(t)
        };
        let image = load(&entry.image, image_shape)?;
        let mask = load(&entry.mask, mask_shape)?;
        if let Some(bad) = mask
            .data()
            .iter()
            .find(|&&l| l < 0.0 || l.fract() != 0.0 || l as usize >= manifest.num_classes)
        {
            return Err(Error::Dataset(format!(
                "{} holds label {bad}, expected integers in 0..{}",
                root.join(&entry.mask).display(),
                manifest.num_classes
            )));
        }
        samples.push(Sample { image, mask });
    }
    Ok(Dataset { manifest, samples })
}
