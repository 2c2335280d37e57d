use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_gray8, DatasetManifest, SampleEntry, Split, MANIFEST_FILE, MANIFEST_SCHEMA_VERSION};
use crate::consensus::AnnotationSet;
use crate::error::{Error, Result};
use crate::maps::{Map, Mask};

/// Parameters of a synthetic multi-annotator dataset of noisy blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    /// The last `test_count` samples form the test split.
    pub test_count: usize,
    pub image_size: usize,
    pub annotators: usize,
    /// Amplitude of each annotator's low-frequency boundary perturbation, relative to the radius.
    pub radial_noise: f64,
    /// Std of each annotator's center offset, as a fraction of the image size.
    pub offset_noise: f64,
    /// Std of additive Gaussian noise on the image.
    pub image_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 24,
            test_count: 8,
            image_size: 32,
            annotators: 3,
            radial_noise: 0.12,
            offset_noise: 0.02,
            image_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.count == 0 {
            errs.push("count must be >= 1".to_string());
        }
        if self.test_count > self.count {
            errs.push(format!("test_count {} exceeds count {}", self.test_count, self.count));
        }
        if self.image_size < 4 {
            errs.push("image_size must be >= 4".to_string());
        }
        if self.annotators == 0 {
            errs.push("annotators must be >= 1".to_string());
        }
        for (name, v) in [
            ("radial_noise", self.radial_noise),
            ("offset_noise", self.offset_noise),
            ("image_noise", self.image_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    fn id_width(&self) -> usize {
        self.count.saturating_sub(1).to_string().len().max(4)
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index + self.test_count >= self.count {
            Split::Test
        } else {
            Split::Train
        }
    }
}

const HARMONICS: usize = 3;

/// Star-shaped region `r < R(phi)` around a center.
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    /// Multiplicative boundary perturbation: `1 + sum_k amp_k cos(k phi + phase_k)`.
    wobble: [(f64, f64); HARMONICS],
}

impl Blob {
    fn radius(&self, phi: f64) -> f64 {
        let t = phi - self.angle;
        let (s, c) = t.sin_cos();
        let ellipse = self.a * self.b / ((self.b * c).powi(2) + (self.a * s).powi(2)).sqrt();
        let w: f64 = self
            .wobble
            .iter()
            .enumerate()
            .map(|(k, &(amp, ph))| amp * ((k + 1) as f64 * phi + ph).cos())
            .sum();
        ellipse * (1.0 + w).max(0.05)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * dx + dy * dy).sqrt() < self.radius(dy.atan2(dx))
    }

    fn rasterize(&self, size: usize) -> Vec<u8> {
        (0..size * size)
            .map(|i| u8::from(self.contains((i % size) as f64 + 0.5, (i / size) as f64 + 0.5)))
            .collect()
    }
}

fn sample_one(spec: &SynthSpec, index: usize) -> Result<AnnotationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let s = spec.image_size as f64;
    let a = rng.random_range(0.16..0.30) * s;
    let b = rng.random_range(0.16..0.30) * s;
    let truth = Blob {
        cx: rng.random_range(0.38..0.62) * s,
        cy: rng.random_range(0.38..0.62) * s,
        a,
        b,
        angle: rng.random_range(0.0..TAU),
        wobble: std::array::from_fn(|k| (rng.random_range(0.0..0.12) / (k + 1) as f64, rng.random_range(0.0..TAU))),
    };
    let fg = rng.random_range(0.6..0.85);
    let bg = rng.random_range(0.15..0.35);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut masks = Vec::with_capacity(spec.annotators);
    for _ in 0..spec.annotators {
        let mut blob = Blob {
            cx: truth.cx + spec.offset_noise * s * std_normal.sample(&mut rng),
            cy: truth.cy + spec.offset_noise * s * std_normal.sample(&mut rng),
            wobble: truth.wobble,
            ..truth
        };
        for (k, w) in blob.wobble.iter_mut().enumerate() {
            let amp = spec.radial_noise / (k + 1) as f64 * std_normal.sample(&mut rng);
            let phase = rng.random_range(0.0..TAU);
            // fold an independent harmonic of the same order into the shared one
            let (re, im) = (w.0 * w.1.cos() + amp * phase.cos(), w.0 * w.1.sin() + amp * phase.sin());
            *w = ((re * re + im * im).sqrt(), im.atan2(re));
        }
        masks.push(Mask::new(spec.image_size, spec.image_size, blob.rasterize(spec.image_size))?);
    }
    let inside = truth.rasterize(spec.image_size);
    let pixels = inside
        .iter()
        .map(|&m| {
            let v = if m == 1 { fg } else { bg } + spec.image_noise * std_normal.sample(&mut rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
        })
        .collect();
    let image = Map::new(spec.image_size, spec.image_size, pixels)?;
    let id = format!("{index:0width$}", width = spec.id_width());
    AnnotationSet::new(id, image, masks)
}

/// Generates the samples in memory; images are quantized to 8 bits exactly as written to disk.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<AnnotationSet>> {
    spec.validate()?;
    (0..spec.count).map(|i| sample_one(spec, i)).collect()
}

/// Writes a dataset directory (manifest, images, masks) and returns its manifest.
pub fn gen_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = synthesize(spec)?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n = spec.image_size;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("images/{}.png", s.sample_id);
        let bytes: Vec<u8> = s.image().data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        write_gray8(&out_dir.join(&image), n, n, &bytes)?;
        let mut masks = Vec::new();
        for (a, m) in s.masks().iter().enumerate() {
            let rel = format!("masks/{}_a{a}.png", s.sample_id);
            let bytes: Vec<u8> = m.data().iter().map(|&v| v * 255).collect();
            write_gray8(&out_dir.join(&rel), n, n, &bytes)?;
            masks.push(rel);
        }
        entries.push(SampleEntry {
            id: s.sample_id.clone(),
            image,
            masks,
            split: spec.split_of(i),
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        annotators: spec.annotators,
        samples: entries,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
