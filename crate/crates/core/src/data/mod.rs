//! Datasets on disk: manifest, loading, augmentation and synthetic generation.
//!
//! A dataset directory holds `manifest.json`, 8-bit grayscale images under
//! `images/<id>.png` and binary masks (0 or 255) under `masks/<id>_a<i>.png`.

mod augment;
mod png_io;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consensus::AnnotationSet;
use crate::error::{Error, Result};
use crate::maps::{Map, Mask};

pub use augment::{apply_affine, augment, resize_bilinear, resize_nearest, AffineDraw, AugmentParams};
pub use png_io::{read_gray, write_gray16, write_gray8, GrayImage};
pub use synth::{gen_synthetic, synthesize, SynthSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    /// Path relative to the manifest directory.
    pub image: String,
    pub masks: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Annotators per sample; the same for every sample.
    pub annotators: usize,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported manifest schema_version {} (expected {MANIFEST_SCHEMA_VERSION})",
                path.display(),
                m.schema_version
            )));
        }
        m.validate()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.annotators == 0 {
            return Err("annotators must be >= 1".into());
        }
        for s in &self.samples {
            if s.masks.len() != self.annotators {
                return Err(format!(
                    "sample {} lists {} masks but the dataset has {} annotators",
                    s.id,
                    s.masks.len(),
                    self.annotators
                ));
            }
        }
        Ok(())
    }
}

/// Options for [`load_dataset`].
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Resample every sample to this square size.
    pub image_size: Option<usize>,
    /// Reject mask pixels other than 0 and the maximum value instead of thresholding at half.
    pub strict: bool,
    /// Keep only samples of this split.
    pub split: Option<Split>,
}

/// Samples of one dataset, all with the same annotator count and size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub annotators: usize,
    pub samples: Vec<AnnotationSet>,
}

impl Dataset {
    pub fn new(samples: Vec<AnnotationSet>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("dataset has no samples".into()))?;
        let (annotators, dims) = (first.annotator_count(), first.dims());
        for s in &samples {
            if s.annotator_count() != annotators {
                return Err(Error::Data(format!(
                    "sample {} has {} annotators, expected {annotators}",
                    s.sample_id,
                    s.annotator_count()
                )));
            }
            if s.dims() != dims {
                return Err(Error::Data(format!(
                    "sample {} is {:?}, expected {dims:?}",
                    s.sample_id,
                    s.dims()
                )));
            }
        }
        Ok(Self { annotators, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.samples[0].dims()
    }
}

fn load_image(path: &Path, size: Option<usize>) -> Result<Map> {
    let g = read_gray(path)?;
    let scale = g.max_value as f32;
    let map = Map::new(g.height, g.width, g.data.iter().map(|&v| v as f32 / scale).collect())?;
    Ok(match size {
        Some(s) => resize_bilinear(&map, s, s),
        None => map,
    })
}

fn load_mask(path: &Path, strict: bool, size: Option<usize>) -> Result<Mask> {
    let g = read_gray(path)?;
    if strict {
        if let Some(v) = g.data.iter().find(|&&v| v != 0 && v != g.max_value) {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("mask value {v} is neither 0 nor {}", g.max_value),
            });
        }
    }
    let half = g.max_value / 2;
    let data = g.data.iter().map(|&v| u8::from(v > half)).collect();
    let mask = Mask::new(g.height, g.width, data)?;
    Ok(match size {
        Some(s) => resize_nearest(&mask, s, s),
        None => mask,
    })
}

/// Reads the manifest and every referenced file.
pub fn load_dataset(manifest_path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    for entry in &manifest.samples {
        if opts.split.is_some_and(|s| s != entry.split) {
            continue;
        }
        let image_path = root.join(&entry.image);
        let image = load_image(&image_path, opts.image_size)?;
        let mut masks = Vec::with_capacity(entry.masks.len());
        for m in &entry.masks {
            let mp = root.join(m);
            let mask = load_mask(&mp, opts.strict, opts.image_size)?;
            if mask.dims() != image.dims() {
                return Err(Error::Data(format!(
                    "{} is {:?} but image {} is {:?}",
                    mp.display(),
                    mask.dims(),
                    image_path.display(),
                    image.dims()
                )));
            }
            masks.push(mask);
        }
        samples.push(AnnotationSet::new(entry.id.clone(), image, masks)?);
    }
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "{}: no samples{}",
            manifest_path.display(),
            opts.split.map(|s| format!(" in split {s:?}")).unwrap_or_default()
        )));
    }
    Dataset::new(samples)
}
