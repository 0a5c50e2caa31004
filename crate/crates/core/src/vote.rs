//! Temporal voting over three consecutive scans, and segmentation metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_cloud, PointCloud, RigidTransform};
use crate::maps::SemanticScores;
use crate::neighbors::KdTree;

pub const DEFAULT_SIGMA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteConfig {
    /// A neighbor contributes only when its distance is strictly below `sigma` (meters).
    pub sigma: f64,
}

impl VoteConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA }
    }
}

/// One scan: its points, per-point scores, and the transform into the shared frame.
#[derive(Debug, Clone, Copy)]
pub struct VoteFrame<'a> {
    pub cloud: &'a PointCloud,
    pub scores: &'a SemanticScores,
    pub pose: &'a RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutput {
    pub scores: SemanticScores,
    pub labels: Vec<u32>,
    /// Number of rows averaged per point (1 to 3).
    pub counts: Vec<u8>,
}

fn check_frame(name: &str, f: &VoteFrame<'_>, classes: usize) -> Result<()> {
    if f.scores.rows() != f.cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "{name} frame has {} points but {} score rows",
            f.cloud.len(),
            f.scores.rows()
        )));
    }
    if f.scores.classes() != classes {
        return Err(Error::ShapeMismatch(format!(
            "{name} frame has {} classes, current frame has {classes}",
            f.scores.classes()
        )));
    }
    Ok(())
}

/// Refines the current frame's scores with its nearest neighbors in the
/// previous and next frames.
///
/// All clouds are mapped into the shared frame by their poses. For each
/// current point, a neighbor frame's nearest point adds its score row when its
/// distance is `< sigma`; the sum is divided by the number of rows used.
/// Labels are the per-row argmax (lowest class on ties).
pub fn vote(prev: VoteFrame<'_>, curr: VoteFrame<'_>, next: VoteFrame<'_>, cfg: &VoteConfig) -> Result<VoteOutput> {
    let classes = curr.scores.classes();
    check_frame("previous", &prev, classes)?;
    check_frame("current", &curr, classes)?;
    check_frame("next", &next, classes)?;
    if !(cfg.sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be >= 0, got {}", cfg.sigma)));
    }

    let prev_pts = transform_cloud(prev.cloud, prev.pose);
    let curr_pts = transform_cloud(curr.cloud, curr.pose);
    let next_pts = transform_cloud(next.cloud, next.pose);
    let prev_tree = KdTree::build(prev_pts.coords());
    let next_tree = KdTree::build(next_pts.coords());

    let rows: Vec<(Vec<f64>, u8)> = curr_pts
        .coords()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut acc = curr.scores.row(i).to_vec();
            let mut n = 1u8;
            for (tree, scores) in [(&prev_tree, prev.scores), (&next_tree, next.scores)] {
                if let Some((d, j)) = tree.nearest(p) {
                    if d < cfg.sigma {
                        for (a, s) in acc.iter_mut().zip(scores.row(j)) {
                            *a += s;
                        }
                        n += 1;
                    }
                }
            }
            let denom = f64::from(n);
            acc.iter_mut().for_each(|a| *a /= denom);
            (acc, n)
        })
        .collect();

    let mut data = Vec::with_capacity(curr.scores.data().len());
    let mut counts = Vec::with_capacity(rows.len());
    for (row, n) in rows {
        data.extend(row);
        counts.push(n);
    }
    let scores = SemanticScores::new(curr.scores.rows(), classes, data, false)?;
    let labels = scores.argmax();
    // keep the probability flag when the averaged rows still validate as such
    let scores = if curr.scores.is_probabilities() {
        SemanticScores::new(scores.rows(), classes, scores.data().to_vec(), true).unwrap_or(scores)
    } else {
        scores
    };
    Ok(VoteOutput { scores, labels, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class IoU = TP / (TP + FP + FN) and their mean over present classes.
/// Points whose truth equals `ignore` are skipped.
pub fn miou(pred: &[u32], truth: &[u32], num_classes: usize, ignore: Option<u32>) -> Result<IouReport> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if Some(t) == ignore {
            continue;
        }
        for label in [p, t] {
            if label as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: num_classes,
                });
            }
        }
        if p == t {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[t as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IouReport { per_class, miou })
}
