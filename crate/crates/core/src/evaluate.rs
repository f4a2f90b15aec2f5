//! Batch J&F evaluation of a prediction tree against ground truth.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::manifest::{prediction_path, LabelSource, Manifest, SequenceEntry};
use crate::metrics::{self, FrameScore, MetricReport, MetricsError, SequenceKey};
use crate::raster::{self, RasterError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{key}: no ground truth for frame {frame:?}")]
    NoGroundTruth { key: String, frame: String },
    #[error("{key} frame {frame:?}: {source}")]
    Metric {
        key: String,
        frame: String,
        #[source]
        source: MetricsError,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Aggregate(MetricsError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Where ground-truth masks live.
#[derive(Debug, Clone, Copy)]
pub enum GroundTruth<'a> {
    /// `<dir>/<video>/<expression>/<frame>.png`, the prediction layout.
    Tree(&'a Path),
    /// Each entry's `label_dir`; only ground-truth labeled entries qualify.
    ManifestLabels,
}

fn gt_path(gt: GroundTruth<'_>, entry: &SequenceEntry, frame: &str) -> Result<PathBuf> {
    match gt {
        GroundTruth::Tree(root) => Ok(prediction_path(root, &entry.key(), frame)),
        GroundTruth::ManifestLabels => match (entry.label_source, entry.label_path(frame)) {
            (LabelSource::GroundTruth, Some(p)) => Ok(p),
            _ => Err(EvalError::NoGroundTruth {
                key: entry.key().to_string(),
                frame: frame.to_string(),
            }),
        },
    }
}

fn score_entry(
    entry: &SequenceEntry,
    pred_root: &Path,
    gt: GroundTruth<'_>,
    bound_frac: f64,
) -> Result<(SequenceKey, FrameScore)> {
    let key = entry.key();
    let scores = entry
        .frame_ids
        .par_iter()
        .map(|frame| {
            let pred = raster::read_mask(&prediction_path(pred_root, &key, frame))?;
            let truth = raster::read_mask(&gt_path(gt, entry, frame)?)?;
            metrics::score_frame(&pred, &truth, bound_frac).map_err(|source| EvalError::Metric {
                key: key.to_string(),
                frame: frame.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((key, metrics::mean_score(&scores)))
}

/// Scores `<pred_root>/<video>/<expression>/<frame>.png` for every frame in
/// the manifest.
pub fn evaluate_tree(
    manifest: &Manifest,
    pred_root: &Path,
    gt: GroundTruth<'_>,
    bound_frac: f64,
) -> Result<MetricReport> {
    let per_sequence = manifest
        .entries
        .par_iter()
        .map(|e| score_entry(e, pred_root, gt, bound_frac))
        .collect::<Result<Vec<_>>>()?;
    metrics::aggregate(per_sequence).map_err(EvalError::Aggregate)
}
