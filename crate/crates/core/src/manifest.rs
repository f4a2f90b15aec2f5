//! Dataset manifests: videos x expressions x frames, with label provenance.
//!
//! On disk a manifest is canonical JSON (sorted keys, two-space indent,
//! trailing newline) whose paths are relative to the manifest's own
//! directory. In memory every path is absolute, so manifests can be merged
//! and re-saved anywhere.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::Add;
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::SequenceKey;

pub const SCHEMA: &str = "vtk-manifest/1";

/// Image extensions tried, in order, when resolving a frame id to a file.
pub const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported schema {found:?}, expected {SCHEMA:?}")]
    Schema { path: String, found: String },
    #[error("{key}: {message}")]
    Entry { key: String, message: String },
    #[error("duplicate sequence {0}")]
    DuplicateKey(String),
    #[error("{key}: frame {frame:?} not found under {dir}")]
    MissingFrame {
        key: String,
        frame: String,
        dir: String,
    },
    #[error("{key}: missing label file {path}")]
    MissingLabel { key: String, path: String },
    #[error("{key}: missing prediction for frame {frame:?} at {path}")]
    MissingPrediction {
        key: String,
        frame: String,
        path: String,
    },
    #[error("pseudo-label round must be at least 1")]
    BadRound,
    #[error("nothing to merge")]
    EmptyMerge,
}

pub type Result<T> = std::result::Result<T, ManifestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    Pseudo(u32),
    #[serde(rename = "none")]
    Unlabeled,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelSource::GroundTruth => f.write_str("ground_truth"),
            LabelSource::Pseudo(r) => write!(f, "pseudo({r})"),
            LabelSource::Unlabeled => f.write_str("none"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceEntry {
    pub video_id: String,
    pub expression_id: String,
    pub expression_text: String,
    pub frame_ids: Vec<String>,
    pub frame_dir: PathBuf,
    pub label_dir: Option<PathBuf>,
    pub label_source: LabelSource,
}

impl SequenceEntry {
    pub fn key(&self) -> SequenceKey {
        SequenceKey::new(&self.video_id, &self.expression_id)
    }

    /// First existing `<frame_dir>/<frame_id>.<ext>`.
    pub fn frame_path(&self, frame_id: &str) -> Option<PathBuf> {
        FRAME_EXTENSIONS
            .iter()
            .map(|ext| self.frame_dir.join(format!("{frame_id}.{ext}")))
            .find(|p| p.is_file())
    }

    pub fn label_path(&self, frame_id: &str) -> Option<PathBuf> {
        self.label_dir
            .as_ref()
            .map(|d| d.join(format!("{frame_id}.png")))
    }

    fn check_shape(&self) -> Result<()> {
        let fail = |message: &str| {
            Err(ManifestError::Entry {
                key: self.key().to_string(),
                message: message.to_string(),
            })
        };
        if self.video_id.is_empty() || self.expression_id.is_empty() {
            return fail("empty video or expression id");
        }
        if self.frame_ids.is_empty() {
            return fail("no frames");
        }
        if self.frame_ids.windows(2).any(|w| w[0] >= w[1]) {
            return fail("frame ids must be unique and sorted ascending");
        }
        match (self.label_source, &self.label_dir) {
            (LabelSource::Unlabeled, Some(_)) => fail("label_dir set on an unlabeled entry"),
            (LabelSource::GroundTruth | LabelSource::Pseudo(_), None) => {
                fail("labeled entry without label_dir")
            }
            (LabelSource::Pseudo(0), _) => fail("pseudo round must be at least 1"),
            _ => Ok(()),
        }
    }

    fn check_files(&self) -> Result<()> {
        let key = self.key().to_string();
        for frame in &self.frame_ids {
            if self.frame_path(frame).is_none() {
                return Err(ManifestError::MissingFrame {
                    key,
                    frame: frame.clone(),
                    dir: self.frame_dir.display().to_string(),
                });
            }
            if let Some(label) = self.label_path(frame) {
                if !label.is_file() {
                    return Err(ManifestError::MissingLabel {
                        key,
                        path: label.display().to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub split_name: String,
    pub entries: Vec<SequenceEntry>,
}

impl Manifest {
    /// Structural invariants: entry shapes and unique sequence keys.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            e.check_shape()?;
            if !seen.insert(e.key()) {
                return Err(ManifestError::DuplicateKey(e.key().to_string()));
            }
        }
        Ok(())
    }

    /// Checks that every referenced frame and label file exists.
    pub fn validate_files(&self) -> Result<()> {
        let results: Vec<Result<()>> = self.entries.par_iter().map(|e| e.check_files()).collect();
        results.into_iter().collect()
    }

    pub fn frame_count(&self) -> usize {
        self.entries.iter().map(|e| e.frame_ids.len()).sum()
    }

    pub fn find(&self, key: &SequenceKey) -> Option<&SequenceEntry> {
        self.entries.iter().find(|e| &e.key() == key)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema: String,
    split: String,
    entries: Vec<EntryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    video: String,
    expression_id: String,
    expression: String,
    frames: Vec<String>,
    frame_dir: String,
    label_dir: Option<String>,
    label_source: LabelSource,
}

/// Lexically resolves `.` and `..` components.
pub fn normalize_path(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Absolute, symlink-resolved form of an existing directory.
pub fn resolve_dir(dir: &Path) -> std::io::Result<PathBuf> {
    let dir = if dir.as_os_str().is_empty() {
        Path::new(".")
    } else {
        dir
    };
    std::fs::canonicalize(dir)
}

fn relative_to(path: &Path, base: &Path) -> String {
    let rel = pathdiff::diff_paths(path, base).unwrap_or_else(|| path.to_path_buf());
    let s = rel.to_string_lossy().replace('\\', "/");
    if s.is_empty() {
        ".".to_string()
    } else {
        s
    }
}

/// Parses manifest JSON, resolving relative paths against `base_dir`.
/// Checks structure only; see [`Manifest::validate_files`].
pub fn parse_manifest(text: &str, base_dir: &Path, origin: &str) -> Result<Manifest> {
    let file: ManifestFile = serde_json::from_str(text).map_err(|source| ManifestError::Json {
        path: origin.to_string(),
        source,
    })?;
    if file.schema != SCHEMA {
        return Err(ManifestError::Schema {
            path: origin.to_string(),
            found: file.schema,
        });
    }
    let resolve = |p: &str| normalize_path(&base_dir.join(p));
    let manifest = Manifest {
        split_name: file.split,
        entries: file
            .entries
            .into_iter()
            .map(|e| SequenceEntry {
                frame_dir: resolve(&e.frame_dir),
                label_dir: e.label_dir.as_deref().map(resolve),
                video_id: e.video,
                expression_id: e.expression_id,
                expression_text: e.expression,
                frame_ids: e.frames,
                label_source: e.label_source,
            })
            .collect(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Canonical JSON text with paths made relative to `base_dir`.
pub fn to_canonical_json(m: &Manifest, base_dir: &Path) -> String {
    let file = ManifestFile {
        schema: SCHEMA.to_string(),
        split: m.split_name.clone(),
        entries: m
            .entries
            .iter()
            .map(|e| EntryFile {
                video: e.video_id.clone(),
                expression_id: e.expression_id.clone(),
                expression: e.expression_text.clone(),
                frames: e.frame_ids.clone(),
                frame_dir: relative_to(&e.frame_dir, base_dir),
                label_dir: e.label_dir.as_ref().map(|d| relative_to(d, base_dir)),
                label_source: e.label_source,
            })
            .collect(),
    };
    crate::canonical_json(&file)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let io = |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let base = resolve_dir(path.parent().unwrap_or(Path::new("."))).map_err(io)?;
    let m = parse_manifest(&text, &base, &path.display().to_string())?;
    m.validate_files()?;
    Ok(m)
}

/// Writes canonical JSON; the parent directory must already exist.
pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let io = |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    };
    let base = resolve_dir(path.parent().unwrap_or(Path::new("."))).map_err(io)?;
    std::fs::write(path, to_canonical_json(m, &base)).map_err(io)
}

/// Location of a fused prediction mask.
pub fn prediction_path(pred_root: &Path, key: &SequenceKey, frame_id: &str) -> PathBuf {
    pred_root
        .join(&key.video)
        .join(&key.expression)
        .join(format!("{frame_id}.png"))
}

/// Points every non-ground-truth entry at predicted masks under `pred_root`
/// and tags it `pseudo(round)`. Ground-truth entries are kept unchanged and
/// reported in the returned warnings.
pub fn inject_pseudo(m: &Manifest, pred_root: &Path, round: u32) -> Result<(Manifest, Vec<String>)> {
    if round == 0 {
        return Err(ManifestError::BadRound);
    }
    let pred_root = resolve_dir(pred_root).map_err(|source| ManifestError::Io {
        path: pred_root.display().to_string(),
        source,
    })?;
    let mut warnings = Vec::new();
    let mut out = m.clone();
    for e in &mut out.entries {
        let key = e.key();
        if e.label_source == LabelSource::GroundTruth {
            warnings.push(format!("{key}: ground-truth labels kept, not replaced by pseudo labels"));
            continue;
        }
        for frame in &e.frame_ids {
            let p = prediction_path(&pred_root, &key, frame);
            if !p.is_file() {
                return Err(ManifestError::MissingPrediction {
                    key: key.to_string(),
                    frame: frame.clone(),
                    path: p.display().to_string(),
                });
            }
        }
        e.label_dir = Some(pred_root.join(&key.video).join(&key.expression));
        e.label_source = LabelSource::Pseudo(round);
    }
    Ok((out, warnings))
}

/// Concatenates manifests in order. Sequence keys must be disjoint.
pub fn merge(manifests: &[&Manifest], name: &str) -> Result<Manifest> {
    if manifests.is_empty() {
        return Err(ManifestError::EmptyMerge);
    }
    let merged = Manifest {
        split_name: name.to_string(),
        entries: manifests
            .iter()
            .flat_map(|m| m.entries.iter().cloned())
            .collect(),
    };
    merged.validate()?;
    Ok(merged)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub entries: usize,
    pub frames: usize,
}

impl Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            entries: self.entries + o.entries,
            frames: self.frames + o.frames,
        }
    }
}

/// Entry and frame counts per label source.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProvenanceStats {
    pub buckets: BTreeMap<LabelSource, Counts>,
}

impl ProvenanceStats {
    pub fn get(&self, source: LabelSource) -> Counts {
        self.buckets.get(&source).copied().unwrap_or_default()
    }

    pub fn ground_truth(&self) -> Counts {
        self.get(LabelSource::GroundTruth)
    }

    pub fn unlabeled(&self) -> Counts {
        self.get(LabelSource::Unlabeled)
    }

    /// Sum over every pseudo round.
    pub fn pseudo_total(&self) -> Counts {
        self.buckets
            .iter()
            .filter(|(k, _)| matches!(k, LabelSource::Pseudo(_)))
            .fold(Counts::default(), |acc, (_, c)| acc + *c)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let pseudo: serde_json::Map<String, serde_json::Value> = self
            .buckets
            .iter()
            .filter_map(|(k, c)| match k {
                LabelSource::Pseudo(r) => Some((r.to_string(), serde_json::json!(c))),
                _ => None,
            })
            .collect();
        serde_json::json!({
            "ground_truth": self.ground_truth(),
            "pseudo": pseudo,
            "none": self.unlabeled(),
        })
    }
}

impl Add for ProvenanceStats {
    type Output = ProvenanceStats;
    fn add(mut self, o: ProvenanceStats) -> ProvenanceStats {
        for (k, c) in o.buckets {
            *self.buckets.entry(k).or_default() = self.get(k) + c;
        }
        self
    }
}

pub fn stats(m: &Manifest) -> ProvenanceStats {
    let mut s = ProvenanceStats::default();
    for e in &m.entries {
        let c = s.buckets.entry(e.label_source).or_default();
        c.entries += 1;
        c.frames += e.frame_ids.len();
    }
    s
}
