//! Test-time augmentation: scale x flip variants, their inversion back to
//! the frame geometry, and mean-probability fusion.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hflip_prob, resize_bilinear, target_dims, Dims};
use crate::manifest::{prediction_path, Manifest, SequenceEntry};
use crate::metrics::SequenceKey;
use crate::raster::{self, BinaryMask, ProbMap, RasterError};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TtaError {
    #[error("no scales given")]
    NoScales,
    #[error("scale must be positive")]
    ZeroScale,
    #[error("duplicate scale {0}")]
    DuplicateScale(usize),
    #[error("long-side cap {cap} is below short side {short}")]
    CapBelowShort { cap: usize, short: usize },
    #[error("nothing to fuse")]
    NoOutputs,
    #[error("augmentation {0} appears more than once")]
    DuplicateSpec(String),
    #[error("threshold {0} must lie in (0, 1)")]
    Threshold(f64),
    #[error("{tag}: output is {found} but expected {expected} for a {orig} frame")]
    DimMismatch {
        tag: String,
        found: Dims,
        expected: Dims,
        orig: Dims,
    },
    #[error("bad augmentation tag {0:?}")]
    BadTag(String),
    #[error("{key}: frame {frame:?} not found")]
    MissingFrame { key: String, frame: String },
    #[error("{path}: cannot read image size: {message}")]
    FrameSize { path: String, message: String },
    #[error("{tag} {key}: no prediction for frame {frame:?} (looked for {path}.pfm/.png)")]
    MissingPrediction {
        tag: String,
        key: String,
        frame: String,
        path: String,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TtaError>;

/// One test-time variant: rescale to a short side (optionally capping the
/// long side), optionally mirrored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub short_side: usize,
    pub long_cap: Option<usize>,
    pub hflip: bool,
}

impl AugmentationSpec {
    /// `s<short_side>_f<0|1>`, the directory name of this variant's outputs.
    pub fn tag(&self) -> String {
        format!("s{}_f{}", self.short_side, u8::from(self.hflip))
    }

    pub fn output_dims(&self, orig: Dims) -> Dims {
        target_dims(orig, self.short_side, self.long_cap)
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for AugmentationSpec {
    type Err = TtaError;

    /// Parses a tag; the long-side cap is not part of it.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || TtaError::BadTag(s.to_string());
        let rest = s.strip_prefix('s').ok_or_else(bad)?;
        let (size, flip) = rest.split_once("_f").ok_or_else(bad)?;
        let short_side: usize = size.parse().map_err(|_| bad())?;
        let hflip = match flip {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        if short_side == 0 {
            return Err(bad());
        }
        Ok(Self {
            short_side,
            long_cap: None,
            hflip,
        })
    }
}

/// Cartesian product of scales and flips, ordered by scale, unflipped first.
pub fn enumerate_augs(
    short_sides: &[usize],
    use_flip: bool,
    long_cap: Option<usize>,
) -> Result<Vec<AugmentationSpec>> {
    if short_sides.is_empty() {
        return Err(TtaError::NoScales);
    }
    let mut sizes = short_sides.to_vec();
    sizes.sort_unstable();
    if let Some(w) = sizes.windows(2).find(|w| w[0] == w[1]) {
        return Err(TtaError::DuplicateScale(w[0]));
    }
    if sizes[0] == 0 {
        return Err(TtaError::ZeroScale);
    }
    if let Some(cap) = long_cap {
        let largest = *sizes.last().unwrap();
        if cap < largest {
            return Err(TtaError::CapBelowShort { cap, short: largest });
        }
    }
    let flips: &[bool] = if use_flip { &[false, true] } else { &[false] };
    Ok(sizes
        .iter()
        .flat_map(|&short_side| {
            flips.iter().map(move |&hflip| AugmentationSpec {
                short_side,
                long_cap,
                hflip,
            })
        })
        .collect())
}

/// A model output produced under `spec`, still in the augmented geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedOutput {
    pub spec: AugmentationSpec,
    pub prob: ProbMap,
}

/// Undoes the flip, then resamples back to the frame size.
pub fn invert(out: &AugmentedOutput, orig: Dims) -> Result<ProbMap> {
    let expected = out.spec.output_dims(orig);
    if out.prob.dims() != expected {
        return Err(TtaError::DimMismatch {
            tag: out.spec.tag(),
            found: out.prob.dims(),
            expected,
            orig,
        });
    }
    let unflipped = if out.spec.hflip {
        hflip_prob(&out.prob)
    } else {
        out.prob.clone()
    };
    Ok(resize_bilinear(&unflipped, orig))
}

/// Pixel-wise mean of maps sharing one geometry, thresholded with ties
/// going to foreground. Accumulates in `f64`.
pub fn mean_fuse(maps: &[ProbMap], threshold: f64) -> Result<BinaryMask> {
    let first = maps.first().ok_or(TtaError::NoOutputs)?;
    let dims = first.dims();
    let mut acc = vec![0f64; dims.area()];
    for m in maps {
        assert_eq!(m.dims(), dims, "mean_fuse inputs must share dims");
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
    }
    let n = maps.len() as f64;
    let data = acc.iter().map(|&s| u8::from(s / n >= threshold)).collect();
    Ok(BinaryMask::new(dims.width, dims.height, data)?)
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(TtaError::Threshold(threshold))
    }
}

/// Inverts every output to `orig` and fuses them. The result does not
/// depend on the order of `outputs`.
pub fn fuse(outputs: &[AugmentedOutput], orig: Dims, threshold: f64) -> Result<BinaryMask> {
    check_threshold(threshold)?;
    if outputs.is_empty() {
        return Err(TtaError::NoOutputs);
    }
    let mut sorted: Vec<&AugmentedOutput> = outputs.iter().collect();
    sorted.sort_by_key(|o| o.spec);
    if let Some(w) = sorted.windows(2).find(|w| w[0].spec == w[1].spec) {
        return Err(TtaError::DuplicateSpec(w[0].spec.tag()));
    }
    let maps = sorted
        .iter()
        .map(|o| invert(o, orig))
        .collect::<Result<Vec<_>>>()?;
    mean_fuse(&maps, threshold)
}

/// Size of a frame image, read from its header.
pub fn frame_dims(entry: &SequenceEntry, frame_id: &str) -> Result<Dims> {
    let path = entry
        .frame_path(frame_id)
        .ok_or_else(|| TtaError::MissingFrame {
            key: entry.key().to_string(),
            frame: frame_id.to_string(),
        })?;
    let size = imagesize::size(&path).map_err(|e| TtaError::FrameSize {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if size.width == 0 || size.height == 0 {
        return Err(TtaError::FrameSize {
            path: path.display().to_string(),
            message: "zero-sized image".into(),
        });
    }
    Ok(Dims::new(size.width, size.height))
}

/// `<pred_root>/<tag>/<video>/<expression>/<frame>` without extension.
pub fn augmented_stem(pred_root: &Path, spec: &AugmentationSpec, key: &SequenceKey, frame_id: &str) -> PathBuf {
    pred_root
        .join(spec.tag())
        .join(&key.video)
        .join(&key.expression)
        .join(frame_id)
}

/// Loads one augmented prediction, preferring `.pfm` and lifting a `.png`
/// hard mask to `{0, 1}` probabilities.
pub fn load_augmented(
    pred_root: &Path,
    spec: &AugmentationSpec,
    key: &SequenceKey,
    frame_id: &str,
) -> Result<AugmentedOutput> {
    let stem = augmented_stem(pred_root, spec, key, frame_id);
    let pfm = stem.with_extension("pfm");
    let png = stem.with_extension("png");
    let prob = if pfm.is_file() {
        raster::read_pfm(&pfm)?
    } else if png.is_file() {
        raster::read_mask(&png)?.to_prob()
    } else {
        return Err(TtaError::MissingPrediction {
            tag: spec.tag(),
            key: key.to_string(),
            frame: frame_id.to_string(),
            path: stem.display().to_string(),
        });
    };
    Ok(AugmentedOutput { spec: *spec, prob })
}

/// Fuses a whole prediction tree into
/// `<out_root>/<video>/<expression>/<frame>.png`. Returns the number of
/// frames written.
pub fn fuse_tree(
    manifest: &Manifest,
    pred_root: &Path,
    specs: &[AugmentationSpec],
    threshold: f64,
    out_root: &Path,
) -> Result<usize> {
    check_threshold(threshold)?;
    let jobs: Vec<(&SequenceEntry, &String)> = manifest
        .entries
        .iter()
        .flat_map(|e| e.frame_ids.iter().map(move |f| (e, f)))
        .collect();
    jobs.par_iter()
        .map(|(entry, frame)| -> Result<()> {
            let key = entry.key();
            let orig = frame_dims(entry, frame)?;
            let outputs = specs
                .iter()
                .map(|s| load_augmented(pred_root, s, &key, frame))
                .collect::<Result<Vec<_>>>()?;
            let mask = fuse(&outputs, orig, threshold)?;
            let path = prediction_path(out_root, &key, frame);
            let dir = path.parent().expect("prediction path has a parent");
            std::fs::create_dir_all(dir).map_err(|source| TtaError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            raster::write_mask(&mask, &path)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(jobs.len())
}
