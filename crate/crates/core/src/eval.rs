//! Segmentation metrics: Dice, thresholded soft Dice and inter-annotator agreement.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::consensus::{AnnotationSet, SoftMap};
use crate::error::{Error, Result};
use crate::maps::Mask;

pub const SOFT_DICE_THRESHOLDS: [f32; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// `2|a ∩ b| / (|a| + |b|)`, with two empty masks scoring 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("dice", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Dice of both maps binarized at `>= theta`, for each threshold.
pub fn soft_dice_per_threshold(pred: &SoftMap, gt: &SoftMap, thresholds: &[f32]) -> Result<Vec<f64>> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            "soft_dice",
            format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims()),
        ));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("threshold {t} outside (0, 1)")));
    }
    thresholds
        .iter()
        .map(|&t| dice(&Mask::threshold(pred.map(), t), &Mask::threshold(gt.map(), t)))
        .collect()
}

/// Mean Dice over the thresholds.
pub fn soft_dice(pred: &SoftMap, gt: &SoftMap, thresholds: &[f32]) -> Result<f64> {
    let per = soft_dice_per_threshold(pred, gt, thresholds)?;
    if per.is_empty() {
        return Err(Error::Config("no soft Dice thresholds".into()));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Matrix of mean Dice between annotators `i` and `j` over all samples.
pub fn pairwise_matrix(samples: &[AnnotationSet]) -> Result<Vec<Vec<f64>>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("pairwise Dice needs at least one sample".into()))?;
    let c = first.annotator_count();
    if c < 2 {
        return Err(Error::Data(format!("pairwise Dice needs at least 2 annotators, got {c}")));
    }
    let mut m = vec![vec![0.0; c]; c];
    for s in samples {
        if s.annotator_count() != c {
            return Err(Error::Data(format!(
                "sample {} has {} annotators, expected {c}",
                s.sample_id,
                s.annotator_count()
            )));
        }
        for i in 0..c {
            for j in 0..c {
                m[i][j] += dice(&s.masks()[i], &s.masks()[j])?;
            }
        }
    }
    let n = samples.len() as f64;
    m.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(m)
}

/// Mean Dice over unordered annotator pairs, averaged over samples.
pub fn pairwise_dice(samples: &[AnnotationSet]) -> Result<f64> {
    let m = pairwise_matrix(samples)?;
    let c = m.len();
    let mut sum = 0.0;
    for i in 0..c {
        for j in i + 1..c {
            sum += m[i][j];
        }
    }
    Ok(sum / (c * (c - 1) / 2) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    /// Soft Dice in `[0, 100]`.
    pub soft_dice: f64,
    pub per_threshold: Vec<f64>,
}

/// Dataset-level results, all scores scaled to `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f32>,
    pub samples: Vec<SampleScore>,
    pub mean_soft_dice: f64,
    pub mean_per_threshold: Vec<f64>,
    /// Annotator-by-annotator mean Dice; absent with a single annotator.
    pub pairwise_matrix: Option<Vec<Vec<f64>>>,
    pub pairwise_mean: Option<f64>,
}

impl EvalReport {
    /// Scores `(sample_id, prediction, ground truth)` triples; annotations feed the agreement table.
    pub fn build(
        scored: &[(String, SoftMap, SoftMap)],
        annotations: &[AnnotationSet],
        thresholds: &[f32],
    ) -> Result<Self> {
        if scored.is_empty() {
            return Err(Error::Data("no predictions to evaluate".into()));
        }
        let mut samples = Vec::with_capacity(scored.len());
        let mut mean_per_threshold = vec![0.0; thresholds.len()];
        for (id, pred, gt) in scored {
            let per: Vec<f64> = soft_dice_per_threshold(pred, gt, thresholds)
                .map_err(|e| Error::Data(format!("sample {id}: {e}")))?
                .into_iter()
                .map(|d| 100.0 * d)
                .collect();
            for (m, d) in mean_per_threshold.iter_mut().zip(&per) {
                *m += d / scored.len() as f64;
            }
            samples.push(SampleScore {
                sample_id: id.clone(),
                soft_dice: per.iter().sum::<f64>() / per.len() as f64,
                per_threshold: per,
            });
        }
        let mean_soft_dice = samples.iter().map(|s| s.soft_dice).sum::<f64>() / samples.len() as f64;
        let multi = annotations.first().is_some_and(|a| a.annotator_count() >= 2);
        let (pairwise_matrix, pairwise_mean) = if multi {
            let m: Vec<Vec<f64>> = pairwise_matrix(annotations)?
                .into_iter()
                .map(|row| row.into_iter().map(|v| 100.0 * v).collect())
                .collect();
            (Some(m), Some(100.0 * pairwise_dice(annotations)?))
        } else {
            (None, None)
        };
        Ok(Self {
            thresholds: thresholds.to_vec(),
            samples,
            mean_soft_dice,
            mean_per_threshold,
            pairwise_matrix,
            pairwise_mean,
        })
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let idw = self.samples.iter().map(|x| x.sample_id.len()).max().unwrap_or(0).max(6);
        let _ = write!(s, "{:<idw$}  {:>9}", "sample", "soft_dice");
        for t in &self.thresholds {
            let _ = write!(s, "  {:>7}", format!("@{t}"));
        }
        s.push('\n');
        for x in &self.samples {
            let _ = write!(s, "{:<idw$}  {:>9.2}", x.sample_id, x.soft_dice);
            for d in &x.per_threshold {
                let _ = write!(s, "  {d:>7.2}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<idw$}  {:>9.2}", "mean", self.mean_soft_dice);
        for d in &self.mean_per_threshold {
            let _ = write!(s, "  {d:>7.2}");
        }
        s.push('\n');
        if let (Some(m), Some(mean)) = (&self.pairwise_matrix, self.pairwise_mean) {
            s.push_str("\npairwise annotator Dice\n");
            let _ = write!(s, "{:>6}", "");
            for j in 0..m.len() {
                let _ = write!(s, "  {:>7}", format!("a{j}"));
            }
            s.push('\n');
            for (i, row) in m.iter().enumerate() {
                let _ = write!(s, "{:>6}", format!("a{i}"));
                for v in row {
                    let _ = write!(s, "  {v:>7.2}");
                }
                s.push('\n');
            }
            let _ = writeln!(s, "mean over pairs: {mean:.2}");
        }
        s
    }
}
