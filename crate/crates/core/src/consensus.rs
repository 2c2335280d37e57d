//! Consensus maps from multiple binary annotations and their fusion into soft maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{Map, Mask};

/// One image with the binary masks of its `C` annotators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub sample_id: String,
    image: Map,
    masks: Vec<Mask>,
}

impl AnnotationSet {
    pub fn new(sample_id: impl Into<String>, image: Map, masks: Vec<Mask>) -> Result<Self> {
        let sample_id = sample_id.into();
        if masks.is_empty() {
            return Err(Error::Data(format!("sample {sample_id}: no annotator masks")));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.dims() != image.dims() {
                return Err(Error::Data(format!(
                    "sample {sample_id}: mask {i} is {:?} but image is {:?}",
                    m.dims(),
                    image.dims()
                )));
            }
        }
        Ok(Self {
            sample_id,
            image,
            masks,
        })
    }

    pub fn image(&self) -> &Map {
        &self.image
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn annotator_count(&self) -> usize {
        self.masks.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// Per-pixel number of annotators marking the pixel.
    pub fn vote_counts(&self) -> Vec<usize> {
        let mut votes = vec![0usize; self.image.len()];
        for m in &self.masks {
            for (v, &a) in votes.iter_mut().zip(m.data()) {
                *v += a as usize;
            }
        }
        votes
    }
}

/// Nested binary maps `M^1 ⊇ M^2 ⊇ ... ⊇ M^C`, where `M^c` marks pixels
/// annotated by at least `c` annotators.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusStack {
    levels: Vec<Mask>,
}

impl ConsensusStack {
    pub fn levels(&self) -> &[Mask] {
        &self.levels
    }

    /// Level `c` in `1..=C`.
    pub fn level(&self, c: usize) -> Result<&Mask> {
        if c == 0 || c > self.levels.len() {
            return Err(Error::OutOfRange {
                what: "consensus level",
                index: c,
                max: self.levels.len(),
            });
        }
        Ok(&self.levels[c - 1])
    }

    pub fn is_nested(&self) -> bool {
        self.levels
            .windows(2)
            .all(|w| w[0].data().iter().zip(w[1].data()).all(|(&lo, &hi)| hi <= lo))
    }
}

/// Real map with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMap(Map);

impl SoftMap {
    /// Clamps every value into `[0, 1]`; NaN maps to 0.
    pub fn clamped(mut map: Map) -> Self {
        for v in map.data_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self(map)
    }

    /// Fails if any value lies outside `[0, 1]`.
    pub fn new(map: Map) -> Result<Self> {
        if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("soft map value {v} outside [0, 1]")));
        }
        Ok(Self(map))
    }

    pub fn map(&self) -> &Map {
        &self.0
    }

    pub fn into_map(self) -> Map {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

pub fn build_consensus_stack(annotations: &AnnotationSet) -> ConsensusStack {
    let (h, w) = annotations.dims();
    let votes = annotations.vote_counts();
    let levels = (1..=annotations.annotator_count())
        .map(|c| {
            let data = votes.iter().map(|&v| u8::from(v >= c)).collect();
            Mask::new(h, w, data).expect("votes thresholded to {0,1}")
        })
        .collect();
    ConsensusStack { levels }
}

/// Fraction of annotators marking each pixel.
pub fn fraction_map(annotations: &AnnotationSet) -> SoftMap {
    let (h, w) = annotations.dims();
    let c = annotations.annotator_count() as f64;
    let data = annotations
        .vote_counts()
        .into_iter()
        .map(|v| (v as f64 / c) as f32)
        .collect();
    SoftMap(Map::new(h, w, data).expect("dims from annotations"))
}

/// Elementwise mean of equally-shaped maps, clamped to `[0, 1]`.
pub fn average_levels(levels: &[Map]) -> Result<SoftMap> {
    let first = levels
        .first()
        .ok_or_else(|| Error::shape("average_levels", "no levels to average"))?;
    let mut acc = vec![0f64; first.len()];
    for (i, m) in levels.iter().enumerate() {
        if m.dims() != first.dims() {
            return Err(Error::shape(
                "average_levels",
                format!("level {} is {:?}, level 1 is {:?}", i + 1, m.dims(), first.dims()),
            ));
        }
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
    }
    let c = levels.len() as f64;
    let data = acc.into_iter().map(|s| (s / c) as f32).collect();
    Ok(SoftMap::clamped(Map::new(first.height(), first.width(), data)?))
}

pub fn average_stack(stack: &ConsensusStack) -> SoftMap {
    let maps: Vec<Map> = stack.levels.iter().map(Mask::to_map).collect();
    average_levels(&maps).expect("stack levels share a shape")
}
