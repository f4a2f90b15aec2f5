//! Triangular cyclical learning rate.
//!
//! One cycle spans one epoch. Each cycle starts at `lr_min`, rises linearly
//! to `lr_max` at mid-epoch and falls back linearly. The schedule is
//! evaluated per iteration and exported as CSV for an external trainer.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_LR_MIN: f64 = 1e-7;
pub const DEFAULT_LR_MAX: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ClrError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("iteration {iter} outside schedule of {total} iterations")]
    OutOfRange { iter: u64, total: u64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ClrError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub lr_min: f64,
    pub lr_max: f64,
    pub iters_per_epoch: u64,
    pub epochs: u64,
}

impl ScheduleSpec {
    pub fn new(lr_min: f64, lr_max: f64, iters_per_epoch: u64, epochs: u64) -> Result<Self> {
        let spec = Self {
            lr_min,
            lr_max,
            iters_per_epoch,
            epochs,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min.is_finite()) {
            return Err(ClrError::Invalid(format!("lr_min {} must be positive", self.lr_min)));
        }
        if !(self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return Err(ClrError::Invalid(format!(
                "lr_max {} must be at least lr_min {}",
                self.lr_max, self.lr_min
            )));
        }
        if self.iters_per_epoch == 0 || self.epochs == 0 {
            return Err(ClrError::Invalid(
                "iters_per_epoch and epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> u64 {
        self.iters_per_epoch * self.epochs
    }
}

/// Learning rate at a global iteration index.
///
/// With an odd cycle length the peak falls between two samples, so
/// `lr_max` itself is never emitted.
pub fn lr_at(spec: &ScheduleSpec, iter: u64) -> Result<f64> {
    let total = spec.total_iters();
    if iter >= total {
        return Err(ClrError::OutOfRange { iter, total });
    }
    let n = spec.iters_per_epoch;
    let x = (iter % n) as f64 / n as f64;
    let height = 1.0 - (2.0 * x - 1.0).abs();
    // endpoints are exact: height 0 gives lr_min, height 1 gives lr_max
    let lr = spec.lr_min * (1.0 - height) + spec.lr_max * height;
    Ok(lr.clamp(spec.lr_min, spec.lr_max))
}

/// Every iteration's rate, in order.
pub fn schedule(spec: &ScheduleSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    (0..spec.total_iters()).map(|i| lr_at(spec, i)).collect()
}

/// Scientific notation with 12 significant digits.
pub fn format_lr(lr: f64) -> String {
    format!("{lr:.11e}")
}

pub fn schedule_csv(spec: &ScheduleSpec) -> Result<String> {
    let mut out = String::from("iter,lr\n");
    for (i, lr) in schedule(spec)?.into_iter().enumerate() {
        out.push_str(&format!("{i},{}\n", format_lr(lr)));
    }
    Ok(out)
}

pub fn emit_schedule(spec: &ScheduleSpec, path: &Path) -> Result<()> {
    let csv = schedule_csv(spec)?;
    let io = |source| ClrError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(csv.as_bytes()).map_err(io)
}
