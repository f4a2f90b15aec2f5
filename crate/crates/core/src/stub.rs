//! Deterministic stand-ins for the segmentation model, plus a synthetic
//! dataset they understand.
//!
//! These exist to exercise pipeline plumbing and bookkeeping. The stub
//! "predictor" recovers the referred object straight from the frame
//! intensities and corrupts a seeded subset of pixels; the corruption rate
//! shrinks as the stub "trainer" sees more labeled frames. Nothing here
//! learns anything.
//!
//! Synthetic frames are 8-bit gray PNGs: background at 20, a bright square
//! at 220 and a dim disk at 140. Expressions mentioning "dim" refer to the
//! disk, every other expression to the square.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{hflip_prob, target_dims, Dims};
use crate::manifest::{self, resolve_dir, LabelSource, Manifest, SequenceEntry};
use crate::raster::{self, BinaryMask, ProbMap};
use crate::tta::AugmentationSpec;

const BACKGROUND: u8 = 20;
const BRIGHT: u8 = 220;
const DIM: u8 = 140;

/// Labeled-frame count at which the stub's noise is halved.
pub const HALF_NOISE_FRAMES: f64 = 16.0;

/// What the stub trainer leaves behind in its output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubModel {
    pub labeled_frames: usize,
    pub ground_truth_frames: usize,
    pub pseudo_frames: usize,
    pub schedule_iters: usize,
    pub round: u32,
}

pub const MODEL_FILE: &str = "model.json";

/// Reads the manifest, touches every label mask, and records what it saw.
pub fn stub_train(manifest_path: &Path, schedule: &Path, out_dir: &Path, round: u32) -> Result<StubModel> {
    let m = manifest::load_manifest(manifest_path)?;
    let mut model = StubModel {
        labeled_frames: 0,
        ground_truth_frames: 0,
        pseudo_frames: 0,
        schedule_iters: 0,
        round,
    };
    for e in &m.entries {
        for f in &e.frame_ids {
            let Some(label) = e.label_path(f) else { continue };
            raster::read_mask(&label)?;
            model.labeled_frames += 1;
            match e.label_source {
                LabelSource::GroundTruth => model.ground_truth_frames += 1,
                LabelSource::Pseudo(_) => model.pseudo_frames += 1,
                LabelSource::Unlabeled => {}
            }
        }
    }
    let csv = std::fs::read_to_string(schedule)
        .with_context(|| format!("reading schedule {}", schedule.display()))?;
    let mut lines = csv.lines();
    if lines.next() != Some("iter,lr") {
        bail!("{}: schedule header must be iter,lr", schedule.display());
    }
    for (i, line) in lines.enumerate() {
        let (iter, lr) = line
            .split_once(',')
            .with_context(|| format!("schedule row {i} malformed"))?;
        let lr: f64 = lr.parse().with_context(|| format!("schedule row {i}: bad lr"))?;
        if iter.parse::<usize>().ok() != Some(i) || lr.is_nan() || lr <= 0.0 {
            bail!("schedule row {i} malformed: {line}");
        }
        model.schedule_iters += 1;
    }
    if model.schedule_iters == 0 {
        bail!("empty schedule");
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(MODEL_FILE), crate::canonical_json(&model))?;
    Ok(model)
}

pub fn load_model(dir: &Path) -> Result<StubModel> {
    let path = dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Noise rate after training on `labeled_frames` frames.
pub fn effective_noise(base: f64, labeled_frames: usize) -> f64 {
    base * HALF_NOISE_FRAMES / (HALF_NOISE_FRAMES + labeled_frames as f64)
}

#[derive(Debug, Clone)]
pub struct StubPredictOptions {
    pub seed: u64,
    pub noise: f64,
    pub model: Option<PathBuf>,
    /// When set, emit PFM probabilities in this variant's geometry;
    /// otherwise hard PNG masks at frame resolution.
    pub aug: Option<AugmentationSpec>,
}

/// The object an expression refers to, read off the frame intensities.
pub fn referred_object(frame: &raster::Gray8, expression: &str) -> BinaryMask {
    let dim = expression.to_lowercase().contains("dim");
    let data = frame
        .data
        .iter()
        .map(|&v| {
            let hit = if dim { (100..180).contains(&v) } else { v >= 180 };
            u8::from(hit)
        })
        .collect();
    BinaryMask::new(frame.dims.width, frame.dims.height, data).expect("shape from frame")
}

fn noise_field(seed: u64, entry: &SequenceEntry, frame: &str, n: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [&entry.video_id, &entry.expression_id, &frame.to_string()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// The stub's corrupted view of the referred object at frame resolution.
fn noisy_truth(entry: &SequenceEntry, frame: &str, seed: u64, noise: f64) -> Result<BinaryMask> {
    let path = entry
        .frame_path(frame)
        .with_context(|| format!("{}: frame {frame} missing", entry.key()))?;
    let gray = raster::read_gray8(&path)?;
    let truth = referred_object(&gray, &entry.expression_text);
    let field = noise_field(seed, entry, frame, truth.data().len());
    let data = truth
        .data()
        .iter()
        .zip(&field)
        .map(|(&t, &u)| if u < noise { 1 - t } else { t })
        .collect();
    Ok(BinaryMask::new(truth.width(), truth.height(), data)?)
}

fn render_augmented(mask: &BinaryMask, spec: &AugmentationSpec) -> ProbMap {
    let d = target_dims(mask.dims(), spec.short_side, spec.long_cap);
    let resized = crate::geometry::resize_nearest(mask, d);
    let soft: Vec<f32> = resized
        .data()
        .iter()
        .map(|&v| if v == 1 { 0.9 } else { 0.1 })
        .collect();
    let prob = ProbMap::new(d.width, d.height, soft).expect("values in range");
    if spec.hflip {
        hflip_prob(&prob)
    } else {
        prob
    }
}

/// Writes one prediction per frame under `<out>/<video>/<expression>/`.
/// Returns the number of files written.
pub fn stub_predict(manifest_path: &Path, out: &Path, opts: &StubPredictOptions) -> Result<usize> {
    if !(0.0..=1.0).contains(&opts.noise) {
        bail!("noise {} must lie in [0, 1]", opts.noise);
    }
    let m = manifest::load_manifest(manifest_path)?;
    let noise = match &opts.model {
        Some(dir) => effective_noise(opts.noise, load_model(dir)?.labeled_frames),
        None => opts.noise,
    };
    let jobs: Vec<(&SequenceEntry, &String)> = m
        .entries
        .iter()
        .flat_map(|e| e.frame_ids.iter().map(move |f| (e, f)))
        .collect();
    jobs.par_iter()
        .map(|(entry, frame)| -> Result<()> {
            let mask = noisy_truth(entry, frame, opts.seed, noise)?;
            let dir = out.join(&entry.video_id).join(&entry.expression_id);
            std::fs::create_dir_all(&dir)?;
            match &opts.aug {
                Some(spec) => {
                    raster::write_pfm(&render_augmented(&mask, spec), &dir.join(format!("{frame}.pfm")))?
                }
                None => raster::write_mask(&mask, &dir.join(format!("{frame}.png")))?,
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(jobs.len())
}

/// Layout of the generated dataset.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    pub dims: Dims,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_videos: 3,
            val_videos: 1,
            test_videos: 1,
            frames: 4,
            dims: Dims::new(48, 32),
        }
    }
}

/// Manifest paths written by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub root: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    /// Same sequences as `val`, labeled with ground truth; for scoring only.
    pub val_gt: PathBuf,
    pub test_gt: PathBuf,
}

pub const EXPRESSIONS: [&str; 2] = [
    "the bright square sliding to the right",
    "the dim disk drifting down",
];

fn draw_frame(dims: Dims, video: usize, t: usize) -> Vec<u8> {
    let (w, h) = (dims.width as f64, dims.height as f64);
    let side = (h * 0.35).max(2.0);
    let sq_x = w * 0.08 + t as f64 * (w * 0.06) + video as f64 * 1.5;
    let sq_y = h * 0.15 + video as f64;
    let radius = (h * 0.2).max(1.5);
    let cx = w * 0.7 - video as f64 * 2.0;
    let cy = h * 0.3 + t as f64 * (h * 0.05);
    let mut data = vec![BACKGROUND; dims.area()];
    for y in 0..dims.height {
        for x in 0..dims.width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let idx = y * dims.width + x;
            if (fx - cx).powi(2) + (fy - cy).powi(2) <= radius * radius {
                data[idx] = DIM;
            }
            if fx >= sq_x && fx < sq_x + side && fy >= sq_y && fy < sq_y + side {
                data[idx] = BRIGHT;
            }
        }
    }
    data
}

fn write_split(
    root: &Path,
    name: &str,
    videos: std::ops::Range<usize>,
    cfg: &SynthConfig,
    labeled: bool,
) -> Result<Manifest> {
    let mut entries = Vec::new();
    for v in videos {
        let video = format!("vid{v:03}");
        let frame_dir = root.join("frames").join(&video);
        std::fs::create_dir_all(&frame_dir)?;
        let frame_ids: Vec<String> = (0..cfg.frames).map(|t| format!("{:05}", t * 5)).collect();
        for (t, id) in frame_ids.iter().enumerate() {
            let gray = draw_frame(cfg.dims, v, t);
            raster::write_gray8(&frame_dir.join(format!("{id}.png")), cfg.dims, &gray)?;
            for (e, text) in EXPRESSIONS.iter().enumerate() {
                let label_dir = root.join("labels").join(&video).join(e.to_string());
                std::fs::create_dir_all(&label_dir)?;
                let truth = referred_object(
                    &raster::Gray8 {
                        dims: cfg.dims,
                        data: gray.clone(),
                    },
                    text,
                );
                raster::write_mask(&truth, &label_dir.join(format!("{id}.png")))?;
            }
        }
        for (e, text) in EXPRESSIONS.iter().enumerate() {
            let label_dir = root.join("labels").join(&video).join(e.to_string());
            entries.push(SequenceEntry {
                video_id: video.clone(),
                expression_id: e.to_string(),
                expression_text: text.to_string(),
                frame_ids: frame_ids.clone(),
                frame_dir: frame_dir.clone(),
                label_dir: labeled.then_some(label_dir),
                label_source: if labeled {
                    LabelSource::GroundTruth
                } else {
                    LabelSource::Unlabeled
                },
            });
        }
    }
    Ok(Manifest {
        split_name: name.to_string(),
        entries,
    })
}

/// Writes frames, ground-truth masks and split manifests under `root`.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig) -> Result<SynthDataset> {
    std::fs::create_dir_all(root)?;
    let root = resolve_dir(root)?;
    let a = cfg.train_videos;
    let b = a + cfg.val_videos;
    let c = b + cfg.test_videos;
    let splits = [
        ("train", 0..a, true),
        ("val", a..b, false),
        ("test", b..c, false),
        ("val_gt", a..b, true),
        ("test_gt", b..c, true),
    ];
    let mut paths = Vec::new();
    for (name, range, labeled) in splits {
        let m = write_split(&root, name, range, cfg, labeled)?;
        let path = root.join(format!("{name}.json"));
        manifest::save_manifest(&m, &path)?;
        paths.push(path);
    }
    let mut it = paths.into_iter();
    Ok(SynthDataset {
        root,
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        val_gt: it.next().unwrap(),
        test_gt: it.next().unwrap(),
    })
}
