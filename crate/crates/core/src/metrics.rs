//! Region similarity (J), contour accuracy (F) and their aggregation.
//!
//! J is the Jaccard index of two masks. F is the F-measure between the two
//! mask boundaries, where a boundary pixel counts as matched if a boundary
//! pixel of the other mask lies within a Euclidean radius derived from the
//! image diagonal. Scores are averaged per frame within a sequence, then
//! every sequence counts equally toward the overall means.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::Dims;
use crate::raster::BinaryMask;

/// Default boundary tolerance as a fraction of the image diagonal.
pub const DEFAULT_BOUND_FRAC: f64 = 0.008;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction is {pred} but ground truth is {gt}")]
    DimMismatch { pred: Dims, gt: Dims },
    #[error("cannot score an empty sequence")]
    EmptySequence,
    #[error("cannot aggregate zero sequences")]
    NoSequences,
    #[error("bound fraction {0} must lie in (0, 1)")]
    BoundFrac(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mean J and F of one frame or one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
}

impl FrameScore {
    pub fn jf(&self) -> f64 {
        (self.j + self.f) / 2.0
    }
}

/// A (video, expression) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SequenceKey {
    pub video: String,
    pub expression: String,
}

impl SequenceKey {
    pub fn new(video: impl Into<String>, expression: impl Into<String>) -> Self {
        Self {
            video: video.into(),
            expression: expression.into(),
        }
    }
}

impl fmt::Display for SequenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.video, self.expression)
    }
}

fn check_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimMismatch {
            pred: pred.dims(),
            gt: gt.dims(),
        });
    }
    Ok(())
}

/// Intersection over union; two empty masks score 1.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels with a background or out-of-bounds 4-neighbor.
pub fn boundary(mask: &BinaryMask) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            out[y * w + x] = edge;
        }
    }
    out
}

/// Matching radius in pixels for a raster of the given size.
pub fn tolerance_radius(dims: Dims, bound_frac: f64) -> usize {
    let diag = ((dims.width * dims.width + dims.height * dims.height) as f64).sqrt();
    (bound_frac * diag).ceil() as usize
}

fn disk_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offs.push((dx, dy));
            }
        }
    }
    offs
}

fn dilate(edge: &[bool], dims: Dims, offsets: &[(isize, isize)]) -> Vec<bool> {
    let (w, h) = (dims.width as isize, dims.height as isize);
    let mut out = vec![false; edge.len()];
    for (i, _) in edge.iter().enumerate().filter(|(_, &e)| e) {
        let (x, y) = ((i % dims.width) as isize, (i / dims.width) as isize);
        for &(dx, dy) in offsets {
            let (nx, ny) = (x + dx, y + dy);
            if nx >= 0 && ny >= 0 && nx < w && ny < h {
                out[(ny * w + nx) as usize] = true;
            }
        }
    }
    out
}

/// Boundary F-measure with a disk tolerance of
/// `ceil(bound_frac * diagonal)` pixels.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, bound_frac: f64) -> Result<f64> {
    check_dims(pred, gt)?;
    if !(bound_frac > 0.0 && bound_frac < 1.0) {
        return Err(MetricsError::BoundFrac(bound_frac));
    }
    let dims = pred.dims();
    let pred_edge = boundary(pred);
    let gt_edge = boundary(gt);
    let n_pred = pred_edge.iter().filter(|&&e| e).count();
    let n_gt = gt_edge.iter().filter(|&&e| e).count();
    match (n_pred, n_gt) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let offsets = disk_offsets(tolerance_radius(dims, bound_frac));
    let gt_zone = dilate(&gt_edge, dims, &offsets);
    let pred_zone = dilate(&pred_edge, dims, &offsets);
    let hits = |edge: &[bool], zone: &[bool]| {
        edge.iter().zip(zone).filter(|(&e, &z)| e && z).count()
    };
    let precision = hits(&pred_edge, &gt_zone) as f64 / n_pred as f64;
    let recall = hits(&gt_edge, &pred_zone) as f64 / n_gt as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn score_frame(pred: &BinaryMask, gt: &BinaryMask, bound_frac: f64) -> Result<FrameScore> {
    Ok(FrameScore {
        j: jaccard(pred, gt)?,
        f: boundary_f(pred, gt, bound_frac)?,
    })
}

/// Mean per-frame J and F over `(pred, gt)` pairs.
pub fn eval_sequence(frames: &[(BinaryMask, BinaryMask)], bound_frac: f64) -> Result<FrameScore> {
    if frames.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let scores = frames
        .iter()
        .map(|(p, g)| score_frame(p, g, bound_frac))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_score(&scores))
}

pub fn mean_score(scores: &[FrameScore]) -> FrameScore {
    let n = scores.len() as f64;
    FrameScore {
        j: scores.iter().map(|s| s.j).sum::<f64>() / n,
        f: scores.iter().map(|s| s.f).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_sequence: BTreeMap<SequenceKey, FrameScore>,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf: f64,
}

/// Unweighted mean across sequences.
pub fn aggregate(
    per_sequence: impl IntoIterator<Item = (SequenceKey, FrameScore)>,
) -> Result<MetricReport> {
    let per_sequence: BTreeMap<_, _> = per_sequence.into_iter().collect();
    if per_sequence.is_empty() {
        return Err(MetricsError::NoSequences);
    }
    let scores: Vec<FrameScore> = per_sequence.values().copied().collect();
    let mean = mean_score(&scores);
    Ok(MetricReport {
        per_sequence,
        j_mean: mean.j,
        f_mean: mean.f,
        jf: mean.jf(),
    })
}

impl MetricReport {
    pub fn to_json(&self) -> Value {
        let per: serde_json::Map<String, Value> = self
            .per_sequence
            .iter()
            .map(|(k, s)| (k.to_string(), json!({ "J": s.j, "F": s.f })))
            .collect();
        json!({
            "per_sequence": per,
            "J_mean": self.j_mean,
            "F_mean": self.f_mean,
            "JF": self.jf,
        })
    }

    /// `video,expression,J,F` rows in key order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("video,expression,J,F\n");
        for (k, s) in &self.per_sequence {
            out.push_str(&format!("{},{},{},{}\n", k.video, k.expression, s.j, s.f));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedRow {
    pub name: String,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Orders leaderboard rows by J&F, then J, both descending, then by name.
pub fn rank_table(rows: impl IntoIterator<Item = (String, f64, f64)>) -> Vec<RankedRow> {
    let mut ranked: Vec<RankedRow> = rows
        .into_iter()
        .map(|(name, j, f)| RankedRow {
            name,
            j,
            f,
            jf: (j + f) / 2.0,
        })
        .collect();
    ranked.sort_by(rank_order);
    ranked
}

/// Total order used by `rank_table`, exposed for callers sorting in place.
pub fn rank_order(a: &RankedRow, b: &RankedRow) -> Ordering {
    b.jf.total_cmp(&a.jf)
        .then_with(|| b.j.total_cmp(&a.j))
        .then_with(|| a.name.cmp(&b.name))
}
