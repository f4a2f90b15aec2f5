//! Resumable six-step pseudo-label self-training.
//!
//! The model is an external program reached only through two argv
//! templates, one for training and one for prediction. Steps, in order:
//!
//! | step | action |
//! |------|--------|
//! | S1 | finetune on the training split with a fresh CLR schedule |
//! | S2 | predict the validation split under every TTA variant, fuse, tag the result `pseudo(1)` |
//! | S3 | re-finetune on train + pseudo-labeled val |
//! | S4 | re-predict val, re-tag as the next pseudo round, re-finetune (repeated once per extra `round_epochs` entry) |
//! | S5 | predict test, re-finetune on train + val + test pseudo labels |
//! | S6 | predict test with the final model |
//!
//! Each step owns `<work_dir>/s<k>/`. The state file is replaced atomically
//! after every step, so a crash leaves either the pre-step or the post-step
//! snapshot. A step that did not complete is re-run from an empty directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clr::{self, ScheduleSpec};
use crate::evaluate::{self, GroundTruth};
use crate::manifest::{self, normalize_path, Manifest};
use crate::metrics::DEFAULT_BOUND_FRAC;
use crate::tta::{self, AugmentationSpec};

pub const STATE_FILE: &str = "state.json";

/// Placeholders a command template may use.
pub const PLACEHOLDERS: [&str; 9] = [
    "manifest", "out_dir", "schedule", "round", "scales", "flip", "long_cap", "model", "seed",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown placeholder {{{0}}} in command template")]
    UnknownPlaceholder(String),
    #[error("placeholder {{{0}}} has no binding")]
    UnboundPlaceholder(String),
    #[error("unterminated placeholder in {0:?}")]
    Unterminated(String),
    #[error("{kind} command must use {{{placeholder}}}")]
    MissingPlaceholder {
        kind: &'static str,
        placeholder: &'static str,
    },
    #[error("manifest {path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: manifest::ManifestError,
    },
    #[error("state was written for config {found}, current config hashes to {expected}; refusing to resume")]
    ConfigChanged { expected: String, found: String },
    #[error("{0} already exists; pass --resume or use a fresh work_dir")]
    StateExists(String),
    #[error("no state to resume at {0}")]
    NoState(String),
    #[error("pipeline is not running ({0})")]
    NotRunning(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// An argv with `{name}` placeholders, executed without a shell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommandTemplate {
    pub argv: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Train,
    Predict,
}

impl CommandKind {
    fn name(self) -> &'static str {
        match self {
            CommandKind::Train => "train",
            CommandKind::Predict => "predict",
        }
    }

    fn required(self) -> [&'static str; 2] {
        match self {
            CommandKind::Train => ["manifest", "schedule"],
            CommandKind::Predict => ["manifest", "out_dir"],
        }
    }
}

/// Splits `arg` into literal text and placeholder names.
fn scan(arg: &str) -> Result<Vec<(bool, &str)>> {
    let mut parts = Vec::new();
    let mut rest = arg;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            parts.push((false, &rest[..open]));
        }
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| PipelineError::Unterminated(arg.to_string()))?;
        parts.push((true, &after[..close]));
        rest = &after[close + 1..];
    }
    if !rest.is_empty() {
        parts.push((false, rest));
    }
    Ok(parts)
}

impl CommandTemplate {
    pub fn new<S: Into<String>>(argv: impl IntoIterator<Item = S>) -> Self {
        Self {
            argv: argv.into_iter().map(Into::into).collect(),
        }
    }

    /// Every placeholder name used, in order of appearance.
    pub fn placeholders(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for arg in &self.argv {
            for (is_name, text) in scan(arg)? {
                if is_name {
                    if !PLACEHOLDERS.contains(&text) {
                        return Err(PipelineError::UnknownPlaceholder(text.to_string()));
                    }
                    names.push(text.to_string());
                }
            }
        }
        Ok(names)
    }

    pub fn validate(&self, kind: CommandKind) -> Result<()> {
        if self.argv.is_empty() {
            return Err(PipelineError::Config(format!("{} command is empty", kind.name())));
        }
        let used = self.placeholders()?;
        for placeholder in kind.required() {
            if !used.iter().any(|u| u == placeholder) {
                return Err(PipelineError::MissingPlaceholder {
                    kind: kind.name(),
                    placeholder,
                });
            }
        }
        Ok(())
    }
}

/// Substitutes placeholders textually. No shell is involved.
pub fn render_command(tpl: &CommandTemplate, bindings: &BTreeMap<&str, String>) -> Result<Vec<String>> {
    tpl.argv
        .iter()
        .map(|arg| {
            let mut out = String::new();
            for (is_name, text) in scan(arg)? {
                if !is_name {
                    out.push_str(text);
                    continue;
                }
                if !PLACEHOLDERS.contains(&text) {
                    return Err(PipelineError::UnknownPlaceholder(text.to_string()));
                }
                let value = bindings
                    .get(text)
                    .ok_or_else(|| PipelineError::UnboundPlaceholder(text.to_string()))?;
                out.push_str(value);
            }
            Ok(out)
        })
        .collect()
}

fn default_lr_min() -> f64 {
    clr::DEFAULT_LR_MIN
}
fn default_lr_max() -> f64 {
    clr::DEFAULT_LR_MAX
}
fn default_round_epochs() -> Vec<u64> {
    vec![4, 5, 7, 7]
}
fn default_scales() -> Vec<usize> {
    vec![288, 352, 448, 512, 640]
}
fn default_true() -> bool {
    true
}
fn default_threshold() -> f64 {
    tta::DEFAULT_THRESHOLD
}
fn default_bound_frac() -> f64 {
    DEFAULT_BOUND_FRAC
}

/// Learning-rate bounds and cycle length shared by every round. Exactly one
/// of `iters_per_epoch` and `frames_per_iter` must be set; the latter
/// derives the cycle length from each round's training-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClrConfig {
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default)]
    pub iters_per_epoch: Option<u64>,
    #[serde(default)]
    pub frames_per_iter: Option<u64>,
}

impl ClrConfig {
    fn iters_for(&self, frames: usize) -> u64 {
        match (self.iters_per_epoch, self.frames_per_iter) {
            (Some(n), _) => n,
            (None, Some(b)) => (frames as u64).div_ceil(b).max(1),
            (None, None) => unreachable!("validated"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Ground truth for the val sequences; enables per-step val reports.
    #[serde(default)]
    pub val_gt_manifest: Option<PathBuf>,
    #[serde(default)]
    pub test_gt_manifest: Option<PathBuf>,
    pub train_cmd: CommandTemplate,
    pub predict_cmd: CommandTemplate,
    pub clr: ClrConfig,
    #[serde(default = "default_round_epochs")]
    pub round_epochs: Vec<u64>,
    #[serde(default = "default_scales")]
    pub tta_scales: Vec<usize>,
    #[serde(default = "default_true")]
    pub tta_flip: bool,
    #[serde(default)]
    pub tta_long_cap: Option<usize>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_bound_frac")]
    pub bound_frac: f64,
    pub work_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|source| PipelineError::Json {
            path: path.display().to_string(),
            source,
        })?;
        let base = manifest::resolve_dir(path.parent().unwrap_or(Path::new("."))).map_err(io_err(path))?;
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| *p = normalize_path(&base.join(&*p));
        fix(&mut self.train_manifest);
        fix(&mut self.val_manifest);
        fix(&mut self.test_manifest);
        if let Some(p) = self.val_gt_manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.test_gt_manifest.as_mut() {
            fix(p);
        }
        fix(&mut self.work_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.round_epochs.is_empty() {
            return bad("round_epochs must not be empty".into());
        }
        if self.round_epochs.contains(&0) {
            return bad("round_epochs entries must be at least 1".into());
        }
        match (self.clr.iters_per_epoch, self.clr.frames_per_iter) {
            (Some(0), _) | (_, Some(0)) => return bad("clr cycle length must be positive".into()),
            (Some(_), Some(_)) | (None, None) => {
                return bad("set exactly one of clr.iters_per_epoch and clr.frames_per_iter".into())
            }
            _ => {}
        }
        ScheduleSpec::new(self.clr.lr_min, self.clr.lr_max, 1, 1)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.augmentations()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if !(self.bound_frac > 0.0 && self.bound_frac < 1.0) {
            return bad(format!("bound_frac {} must lie in (0, 1)", self.bound_frac));
        }
        self.train_cmd.validate(CommandKind::Train)?;
        self.predict_cmd.validate(CommandKind::Predict)?;
        Ok(())
    }

    pub fn augmentations(&self) -> Result<Vec<AugmentationSpec>> {
        tta::enumerate_augs(&self.tta_scales, self.tta_flip, self.tta_long_cap)
            .map_err(|e| PipelineError::Config(format!("tta: {e}")))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(crate::canonical_json(self).as_bytes());
        hex::encode(digest)
    }

    /// Number of val re-prediction rounds performed inside S4.
    pub fn val_rerounds(&self) -> usize {
        self.round_epochs.len().saturating_sub(3).max(1)
    }

    fn epochs(&self, index: usize) -> u64 {
        *self
            .round_epochs
            .get(index)
            .unwrap_or_else(|| self.round_epochs.last().expect("validated nonempty"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StepId {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

pub const STEP_ORDER: [StepId; 6] = [StepId::S1, StepId::S2, StepId::S3, StepId::S4, StepId::S5, StepId::S6];

impl StepId {
    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn dir_name(self) -> String {
        format!("s{}", self.index())
    }

    pub fn describe(self) -> &'static str {
        match self {
            StepId::S1 => "finetune on train with CLR",
            StepId::S2 => "predict val, fuse TTA, inject pseudo labels",
            StepId::S3 => "re-finetune on train + val pseudo labels",
            StepId::S4 => "re-predict val, re-inject, second re-finetune",
            StepId::S5 => "predict test, re-finetune on train + val + test pseudo labels",
            StepId::S6 => "final test prediction",
        }
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.index())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Halted {
        step: StepId,
        error: String,
        /// Relative to the work dir.
        stderr: Option<String>,
    },
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineState {
    pub config_hash: String,
    pub completed_steps: Vec<StepId>,
    pub current_round: u32,
    /// Output paths per completed step, relative to the work dir.
    pub artifacts: BTreeMap<StepId, Vec<String>>,
    pub status: Status,
}

impl PipelineState {
    pub fn next_step(&self) -> Option<StepId> {
        STEP_ORDER.get(self.completed_steps.len()).copied()
    }

    pub fn is_done(&self) -> bool {
        self.status == Status::Done
    }
}

/// Writes via a temp file, fsync and rename.
pub fn persist_state(state: &PipelineState, work_dir: &Path) -> Result<()> {
    let path = work_dir.join(STATE_FILE);
    let tmp = work_dir.join(format!("{STATE_FILE}.tmp"));
    let text = crate::canonical_json(state);
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(text.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    // make the rename durable
    if let Ok(dir) = File::open(work_dir) {
        let _ = dir.sync_all();
    }
    Ok(())
}

pub fn load_state(work_dir: &Path) -> Result<PipelineState> {
    let path = work_dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Why a step stopped; becomes `Status::Halted`.
struct StepFailure {
    error: String,
    stderr: Option<PathBuf>,
}

impl<E: fmt::Display> From<E> for StepFailure {
    fn from(e: E) -> Self {
        StepFailure {
            error: e.to_string(),
            stderr: None,
        }
    }
}

type StepResult<T> = std::result::Result<T, StepFailure>;

/// A configured pipeline bound to its work directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    workers: usize,
}

struct LoadedManifests {
    train: Manifest,
    val: Manifest,
    test: Manifest,
    val_gt: Option<Manifest>,
    test_gt: Option<Manifest>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, workers: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            workers: workers.max(1),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn work_dir(&self) -> &Path {
        &self.config.work_dir
    }

    pub fn step_dir(&self, step: StepId) -> PathBuf {
        self.work_dir().join(step.dir_name())
    }

    fn load_manifests(&self) -> Result<LoadedManifests> {
        let load = |p: &Path| {
            manifest::load_manifest(p).map_err(|source| PipelineError::Manifest {
                path: p.display().to_string(),
                source,
            })
        };
        let opt = |p: &Option<PathBuf>| p.as_deref().map(load).transpose();
        Ok(LoadedManifests {
            train: load(&self.config.train_manifest)?,
            val: load(&self.config.val_manifest)?,
            test: load(&self.config.test_manifest)?,
            val_gt: opt(&self.config.val_gt_manifest)?,
            test_gt: opt(&self.config.test_gt_manifest)?,
        })
    }

    /// Validates inputs and returns a fresh state. Nothing is persisted.
    pub fn plan(&self) -> Result<PipelineState> {
        self.config.validate()?;
        self.load_manifests()?;
        fs::create_dir_all(self.work_dir()).map_err(io_err(self.work_dir()))?;
        Ok(PipelineState {
            config_hash: self.config.hash(),
            completed_steps: Vec::new(),
            current_round: 0,
            artifacts: BTreeMap::new(),
            status: Status::Running,
        })
    }

    /// Executes the next step and persists the resulting state.
    pub fn run_step(&self, mut state: PipelineState) -> Result<PipelineState> {
        if state.status != Status::Running {
            return Err(PipelineError::NotRunning(format!("{:?}", state.status)));
        }
        if state.config_hash != self.config.hash() {
            return Err(PipelineError::ConfigChanged {
                expected: self.config.hash(),
                found: state.config_hash,
            });
        }
        let Some(step) = state.next_step() else {
            state.status = Status::Done;
            persist_state(&state, self.work_dir())?;
            return Ok(state);
        };
        log::info!("{step}: {}", step.describe());
        let dir = self.step_dir(step);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(dir.join("log")).map_err(io_err(&dir))?;

        match self.execute(step, &dir) {
            Ok((round, outputs)) => {
                state.completed_steps.push(step);
                state.current_round = round;
                let rel = outputs.iter().map(|p| self.relative(p)).collect();
                state.artifacts.insert(step, rel);
                if state.next_step().is_none() {
                    state.status = Status::Done;
                }
            }
            Err(failure) => {
                log::error!("{step} halted: {}", failure.error);
                state.status = Status::Halted {
                    step,
                    error: failure.error,
                    stderr: failure.stderr.map(|p| self.relative(&p)),
                };
            }
        }
        persist_state(&state, self.work_dir())?;
        Ok(state)
    }

    /// Runs every remaining step, starting fresh or resuming from the
    /// state file. Completed steps are never re-executed.
    pub fn run_all(&self, resume: bool) -> Result<PipelineState> {
        let state_path = self.work_dir().join(STATE_FILE);
        let mut state = if state_path.exists() {
            if !resume {
                return Err(PipelineError::StateExists(state_path.display().to_string()));
            }
            let mut s = load_state(self.work_dir())?;
            if s.config_hash != self.config.hash() {
                return Err(PipelineError::ConfigChanged {
                    expected: self.config.hash(),
                    found: s.config_hash,
                });
            }
            self.load_manifests()?;
            if matches!(s.status, Status::Halted { .. }) {
                s.status = Status::Running;
            }
            s
        } else {
            if resume {
                return Err(PipelineError::NoState(state_path.display().to_string()));
            }
            let s = self.plan()?;
            persist_state(&s, self.work_dir())?;
            s
        };
        while state.status == Status::Running {
            state = self.run_step(state)?;
        }
        Ok(state)
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(self.work_dir())
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Directory holding S4's `k`-th val re-round (0-based).
    fn reround_dir(&self, k: usize) -> PathBuf {
        let base = self.step_dir(StepId::S4);
        if k == 0 {
            base
        } else {
            base.join(format!("round{}", k + 2))
        }
    }

    fn last_val_round(&self) -> u32 {
        1 + self.config.val_rerounds() as u32
    }

    fn execute(&self, step: StepId, dir: &Path) -> StepResult<(u32, Vec<PathBuf>)> {
        let m = self.load_manifests()?;
        let cfg = &self.config;
        match step {
            StepId::S1 => {
                let model = self.train(dir, &m.train, cfg.epochs(0), 0, None)?;
                Ok((0, vec![dir.join("schedule.csv"), dir.join("manifest.json"), model]))
            }
            StepId::S2 => {
                let model = self.step_dir(StepId::S1).join("model");
                let mut out = self.predict(dir, &cfg.val_manifest, &m.val, &model, 1)?;
                let fused = dir.join("fused");
                let (val_p, warnings) = manifest::inject_pseudo(&m.val, &fused, 1)?;
                for w in warnings {
                    log::warn!("{w}");
                }
                manifest::save_manifest(&val_p, &dir.join("manifest.json"))?;
                out.push(dir.join("manifest.json"));
                out.extend(self.report(dir, m.val_gt.as_ref(), &fused)?);
                Ok((1, out))
            }
            StepId::S3 => {
                let val_p = self.load_step_manifest(&self.step_dir(StepId::S2).join("manifest.json"))?;
                let joint = manifest::merge(&[&m.train, &val_p], "train+val_pseudo1")?;
                let prev = self.step_dir(StepId::S1).join("model");
                let model = self.train(dir, &joint, cfg.epochs(1), 1, Some(&prev))?;
                Ok((1, vec![dir.join("schedule.csv"), dir.join("manifest.json"), model]))
            }
            StepId::S4 => {
                let mut val_prev = self.load_step_manifest(&self.step_dir(StepId::S2).join("manifest.json"))?;
                let mut model = self.step_dir(StepId::S3).join("model");
                let mut out = Vec::new();
                for k in 0..cfg.val_rerounds() {
                    let round = 2 + k as u32;
                    let sub = self.reround_dir(k);
                    fs::create_dir_all(sub.join("log"))?;
                    out.extend(self.predict(&sub, &cfg.val_manifest, &m.val, &model, round)?);
                    let fused = sub.join("fused");
                    out.extend(self.report(&sub, m.val_gt.as_ref(), &fused)?);
                    let (val_p, _) = manifest::inject_pseudo(&val_prev, &fused, round)?;
                    manifest::save_manifest(&val_p, &sub.join("val_pseudo.json"))?;
                    let joint = manifest::merge(&[&m.train, &val_p], &format!("train+val_pseudo{round}"))?;
                    model = self.train(&sub, &joint, cfg.epochs(2 + k), round, Some(&model))?;
                    out.extend([sub.join("val_pseudo.json"), sub.join("schedule.csv"), sub.join("manifest.json")]);
                    out.push(model.clone());
                    val_prev = val_p;
                }
                Ok((self.last_val_round(), out))
            }
            StepId::S5 => {
                let last = self.config.val_rerounds() - 1;
                let val_p = self.load_step_manifest(&self.reround_dir(last).join("val_pseudo.json"))?;
                let model = self.reround_dir(last).join("model");
                let round = self.last_val_round() + 1;
                let mut out = self.predict(dir, &cfg.test_manifest, &m.test, &model, round)?;
                let fused = dir.join("fused");
                out.extend(self.report(dir, m.test_gt.as_ref(), &fused)?);
                let (test_p, _) = manifest::inject_pseudo(&m.test, &fused, round)?;
                manifest::save_manifest(&test_p, &dir.join("test_pseudo.json"))?;
                let joint = manifest::merge(
                    &[&m.train, &val_p, &test_p],
                    &format!("train+val_pseudo{}+test_pseudo{round}", round - 1),
                )?;
                let epochs = cfg.epochs(2 + self.config.val_rerounds());
                let model = self.train(dir, &joint, epochs, round, Some(&model))?;
                out.extend([dir.join("test_pseudo.json"), dir.join("schedule.csv"), dir.join("manifest.json"), model]);
                Ok((round, out))
            }
            StepId::S6 => {
                let model = self.step_dir(StepId::S5).join("model");
                let round = self.last_val_round() + 1;
                let mut out = self.predict(dir, &cfg.test_manifest, &m.test, &model, round)?;
                out.extend(self.report(dir, m.test_gt.as_ref(), &dir.join("fused"))?);
                Ok((round, out))
            }
        }
    }

    fn load_step_manifest(&self, path: &Path) -> StepResult<Manifest> {
        Ok(manifest::load_manifest(path)?)
    }

    fn base_bindings(&self, round: u32) -> BTreeMap<&'static str, String> {
        let mut b = BTreeMap::new();
        b.insert("round", round.to_string());
        b.insert("seed", self.config.seed.to_string());
        b.insert(
            "scales",
            self.config
                .tta_scales
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        b.insert("flip", u8::from(self.config.tta_flip).to_string());
        b.insert(
            "long_cap",
            self.config
                .tta_long_cap
                .map_or_else(|| "none".to_string(), |c| c.to_string()),
        );
        b
    }

    /// Saves the training manifest and a fresh schedule into `dir`, then
    /// invokes the trainer with `<dir>/model` as its output directory.
    fn train(
        &self,
        dir: &Path,
        joint: &Manifest,
        epochs: u64,
        round: u32,
        prev_model: Option<&Path>,
    ) -> StepResult<PathBuf> {
        let manifest_path = dir.join("manifest.json");
        manifest::save_manifest(joint, &manifest_path)?;
        let spec = ScheduleSpec::new(
            self.config.clr.lr_min,
            self.config.clr.lr_max,
            self.config.clr.iters_for(joint.frame_count()),
            epochs,
        )?;
        let schedule = dir.join("schedule.csv");
        clr::emit_schedule(&spec, &schedule)?;
        let model = dir.join("model");
        fs::create_dir_all(&model)?;
        let mut b = self.base_bindings(round);
        b.insert("manifest", manifest_path.display().to_string());
        b.insert("schedule", schedule.display().to_string());
        b.insert("out_dir", model.display().to_string());
        b.insert(
            "model",
            prev_model.map_or_else(|| "none".to_string(), |p| p.display().to_string()),
        );
        let argv = render_command(&self.config.train_cmd, &b)?;
        let outcome = run_command(&argv);
        append_logs(dir, std::slice::from_ref(&outcome))?;
        outcome.into_result(dir)?;
        Ok(model)
    }

    /// Runs the predictor once per augmentation into `<dir>/pred/<tag>`,
    /// then fuses into `<dir>/fused`.
    fn predict(
        &self,
        dir: &Path,
        manifest_path: &Path,
        split: &Manifest,
        model: &Path,
        round: u32,
    ) -> StepResult<Vec<PathBuf>> {
        let specs = self.config.augmentations()?;
        let pred_root = dir.join("pred");
        let jobs = specs
            .iter()
            .map(|spec| {
                let out = pred_root.join(spec.tag());
                fs::create_dir_all(&out)?;
                let mut b = self.base_bindings(round);
                b.insert("manifest", manifest_path.display().to_string());
                b.insert("out_dir", out.display().to_string());
                b.insert("model", model.display().to_string());
                b.insert("scales", spec.short_side.to_string());
                b.insert("flip", u8::from(spec.hflip).to_string());
                Ok(render_command(&self.config.predict_cmd, &b)?)
            })
            .collect::<StepResult<Vec<_>>>()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()?;
        let outcomes: Vec<CommandOutcome> = pool.install(|| jobs.par_iter().map(|a| run_command(a)).collect());
        append_logs(dir, &outcomes)?;
        for o in outcomes {
            o.into_result(dir)?;
        }
        let fused = dir.join("fused");
        let n = tta::fuse_tree(split, &pred_root, &specs, self.config.threshold, &fused)?;
        log::info!("fused {n} frames from {} variants", specs.len());
        Ok(vec![pred_root, fused])
    }

    fn report(&self, dir: &Path, gt: Option<&Manifest>, fused: &Path) -> StepResult<Option<PathBuf>> {
        let Some(gt) = gt else { return Ok(None) };
        let r = evaluate::evaluate_tree(gt, fused, GroundTruth::ManifestLabels, self.config.bound_frac)?;
        log::info!("J {:.4}  F {:.4}  J&F {:.4}", r.j_mean, r.f_mean, r.jf);
        let path = dir.join("report.json");
        fs::write(&path, crate::canonical_json(&r.to_json()))?;
        Ok(Some(path))
    }
}

struct CommandOutcome {
    argv: Vec<String>,
    result: std::io::Result<std::process::Output>,
}

fn run_command(argv: &[String]) -> CommandOutcome {
    log::debug!("exec {argv:?}");
    let result = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .output();
    CommandOutcome {
        argv: argv.to_vec(),
        result,
    }
}

impl CommandOutcome {
    fn into_result(self, dir: &Path) -> StepResult<()> {
        let stderr = Some(dir.join("log").join("stderr.txt"));
        match self.result {
            Ok(out) if out.status.success() => Ok(()),
            Ok(out) => Err(StepFailure {
                error: format!("command {:?} exited with {}", self.argv[0], out.status),
                stderr,
            }),
            Err(e) => Err(StepFailure {
                error: format!("cannot run {:?}: {e}", self.argv[0]),
                stderr,
            }),
        }
    }
}

/// Appends command lines and captured output to `<dir>/log/`.
fn append_logs(dir: &Path, outcomes: &[CommandOutcome]) -> std::io::Result<()> {
    let log_dir = dir.join("log");
    fs::create_dir_all(&log_dir)?;
    let open = |name: &str| fs::OpenOptions::new().create(true).append(true).open(log_dir.join(name));
    let (mut cmds, mut out, mut err) = (open("commands.txt")?, open("stdout.txt")?, open("stderr.txt")?);
    for o in outcomes {
        writeln!(cmds, "{}", o.argv.join(" "))?;
        match &o.result {
            Ok(output) => {
                out.write_all(&output.stdout)?;
                err.write_all(&output.stderr)?;
            }
            Err(e) => writeln!(err, "spawn failed: {e}")?,
        }
    }
    Ok(())
}
