//! Tooling for referring video object segmentation experiments: J&F
//! evaluation, test-time augmentation fusion, triangular cyclical learning
//! rate schedules, dataset manifests with label provenance, and a resumable
//! pseudo-label self-training pipeline that drives external train/predict
//! commands.

pub mod cli;
pub mod clr;
pub mod evaluate;
pub mod geometry;
pub mod manifest;
pub mod metrics;
pub mod raster;
pub mod selftrain;
pub mod stub;
pub mod tta;

pub use geometry::Dims;
pub use raster::{BinaryMask, ProbMap};

/// Pretty JSON with sorted keys, two-space indent and a trailing newline.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> String {
    // serde_json's default map type is ordered, so routing through Value sorts keys
    let value = serde_json::to_value(value).expect("value serializes to JSON");
    let mut text = serde_json::to_string_pretty(&value).expect("JSON value prints");
    text.push('\n');
    text
}
