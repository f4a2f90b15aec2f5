//! Command-line front end. `dispatch` returns the process exit code: 0 on
//! success, 1 on a domain error or halted pipeline, 2 on a usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::clr::{self, ScheduleSpec};
use crate::evaluate::{self, GroundTruth};
use crate::manifest;
use crate::metrics::{self, DEFAULT_BOUND_FRAC};
use crate::selftrain::{Pipeline, PipelineConfig, Status};
use crate::stub::{self, StubPredictOptions, SynthConfig};
use crate::tta::{self, AugmentationSpec, DEFAULT_THRESHOLD};

#[derive(Debug, Parser)]
#[command(name = "vtk", version, about = "Referring video segmentation tooling")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Score a prediction tree with J, F and J&F.
    Evaluate(EvaluateArgs),
    /// Fuse per-variant TTA outputs into binary masks.
    Fuse(FuseArgs),
    /// Write a triangular cyclical learning-rate schedule as CSV.
    Schedule(ScheduleArgs),
    /// Self-training pipeline.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Leaderboard utilities.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Deterministic stand-in predictor for the synthetic dataset.
    StubPredict(StubPredictArgs),
    #[command(hide = true)]
    StubTrain(StubTrainArgs),
    #[command(hide = true)]
    StubData(StubDataArgs),
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Root of `<video>/<expression>/<frame>.png` predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth tree in the same layout; defaults to the manifest's labels.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// JSON report destination.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BOUND_FRAC)]
    bound_frac: f64,
    /// Also write per-sequence rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Directory holding one `s<short>_f<flip>` subdirectory per variant.
    #[arg(long)]
    pred_root: PathBuf,
    /// Comma-separated short sides.
    #[arg(long, value_delimiter = ',', required = true)]
    scales: Vec<usize>,
    /// Include mirrored variants; accepts an optional 0 or 1.
    #[arg(long, default_value = "0", default_missing_value = "1", num_args = 0..=1, value_parser = parse_flag)]
    flip: bool,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_cap)]
    long_cap: Option<Cap>,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = clr::DEFAULT_LR_MIN)]
    lr_min: f64,
    #[arg(long, default_value_t = clr::DEFAULT_LR_MAX)]
    lr_max: f64,
    #[arg(long)]
    iters_per_epoch: u64,
    #[arg(long)]
    epochs: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum PipelineCmd {
    /// Run all remaining steps.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Continue from an existing state file.
        #[arg(long)]
        resume: bool,
        /// Concurrent predictor invocations.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Rank `name,J,F` rows by J&F.
    Rank {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scores are fractions in [0, 1] rather than percentages.
        #[arg(long)]
        fraction: bool,
    },
}

#[derive(Debug, Args)]
struct StubPredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixel flip probability before any training.
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    /// Stub model directory; "none" for an untrained predictor.
    #[arg(long)]
    model: Option<String>,
    /// Emit probabilities for this short side instead of hard masks.
    #[arg(long)]
    scale: Option<usize>,
    /// Mirror the output; accepts an optional 0 or 1.
    #[arg(long, default_value = "0", default_missing_value = "1", num_args = 0..=1, value_parser = parse_flag)]
    flip: bool,
    #[arg(long, value_parser = parse_cap)]
    long_cap: Option<Cap>,
}

#[derive(Debug, Args)]
struct StubTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    round: u32,
    /// Fail while this file exists.
    #[arg(long)]
    fail_marker: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StubDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    train_videos: usize,
    #[arg(long, default_value_t = 1)]
    val_videos: usize,
    #[arg(long, default_value_t = 1)]
    test_videos: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
}

/// Long-side cap as given on the command line; "none" means uncapped.
#[derive(Debug, Clone, Copy)]
struct Cap(Option<usize>);

fn parse_cap(s: &str) -> std::result::Result<Cap, String> {
    if s == "none" {
        return Ok(Cap(None));
    }
    s.parse().map(|v| Cap(Some(v))).map_err(|e| format!("{e}"))
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        _ => Err(format!("expected 0 or 1, got {s:?}")),
    }
}

fn cap(c: Option<Cap>) -> Option<usize> {
    c.and_then(|c| c.0)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Evaluate(a) => evaluate_cmd(a),
        Cmd::Fuse(a) => fuse_cmd(a),
        Cmd::Schedule(a) => {
            let spec = ScheduleSpec::new(a.lr_min, a.lr_max, a.iters_per_epoch, a.epochs)?;
            clr::emit_schedule(&spec, &a.out)?;
            Ok(0)
        }
        Cmd::Pipeline(PipelineCmd::Run {
            config,
            resume,
            workers,
        }) => pipeline_cmd(&config, resume, workers),
        Cmd::Report(ReportCmd::Rank { input, out, fraction }) => rank_cmd(&input, &out, fraction),
        Cmd::StubPredict(a) => stub_predict_cmd(a),
        Cmd::StubTrain(a) => {
            if let Some(marker) = &a.fail_marker {
                if marker.exists() {
                    bail!("failure requested by {}", marker.display());
                }
            }
            let model = stub::stub_train(&a.manifest, &a.schedule, &a.out, a.round)?;
            eprintln!(
                "trained on {} labeled frames ({} pseudo), {} iterations",
                model.labeled_frames, model.pseudo_frames, model.schedule_iters
            );
            Ok(0)
        }
        Cmd::StubData(a) => {
            let cfg = SynthConfig {
                train_videos: a.train_videos,
                val_videos: a.val_videos,
                test_videos: a.test_videos,
                frames: a.frames,
                ..SynthConfig::default()
            };
            let ds = stub::generate_dataset(&a.out, &cfg)?;
            eprintln!("dataset written to {}", ds.root.display());
            Ok(0)
        }
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<i32> {
    let m = manifest::load_manifest(&a.manifest)?;
    let gt = match &a.gt {
        Some(dir) => GroundTruth::Tree(dir),
        None => GroundTruth::ManifestLabels,
    };
    let report = evaluate::evaluate_tree(&m, &a.pred, gt, a.bound_frac)?;
    write_file(&a.out, &crate::canonical_json(&report.to_json()))?;
    if let Some(csv) = &a.csv {
        write_file(csv, &report.to_csv())?;
    }
    eprintln!("J {:.4}  F {:.4}  J&F {:.4}", report.j_mean, report.f_mean, report.jf);
    Ok(0)
}

fn fuse_cmd(a: FuseArgs) -> Result<i32> {
    let m = manifest::load_manifest(&a.manifest)?;
    let specs: Vec<AugmentationSpec> = tta::enumerate_augs(&a.scales, a.flip, cap(a.long_cap))?;
    let n = tta::fuse_tree(&m, &a.pred_root, &specs, a.threshold, &a.out)?;
    eprintln!("fused {n} frames from {} variants", specs.len());
    Ok(0)
}

fn pipeline_cmd(config: &Path, resume: bool, workers: usize) -> Result<i32> {
    let cfg = PipelineConfig::load(config)?;
    let pipeline = Pipeline::new(cfg, workers)?;
    let state = pipeline.run_all(resume)?;
    match &state.status {
        Status::Done => {
            eprintln!("done: {} steps complete", state.completed_steps.len());
            Ok(0)
        }
        Status::Halted { step, error, stderr } => {
            eprintln!("halted at {step}: {error}");
            if let Some(log) = stderr {
                eprintln!("see {}", pipeline.work_dir().join(log).display());
            }
            Ok(1)
        }
        Status::Running => unreachable!("run_all stops only when not running"),
    }
}

/// Rounds away float noise such as `61.95000000000001`.
fn tidy(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

fn rank_cmd(input: &Path, out: &Path, fraction: bool) -> Result<i32> {
    let top = if fraction { 1.0 } else { 100.0 };
    let mut reader = csv::Reader::from_path(input).with_context(|| format!("reading {}", input.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .with_context(|| format!("{}: missing column {name}", input.display()))
    };
    let (ni, ji, fi) = (col("name")?, col("J")?, col("F")?);
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let num = |i: usize| -> Result<f64> {
            let v: f64 = record[i]
                .trim()
                .parse()
                .with_context(|| format!("row {}: bad number {:?}", line + 1, &record[i]))?;
            if !(0.0..=top).contains(&v) {
                bail!("row {}: {v} outside [0, {top}]", line + 1);
            }
            Ok(v)
        };
        rows.push((record[ni].to_string(), num(ji)?, num(fi)?));
    }
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(["rank", "name", "J", "F", "J&F"])?;
    for (i, r) in metrics::rank_table(rows).iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.name.clone(),
            tidy(r.j).to_string(),
            tidy(r.f).to_string(),
            tidy(r.jf).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(0)
}

fn stub_predict_cmd(a: StubPredictArgs) -> Result<i32> {
    let aug = a.scale.map(|short_side| AugmentationSpec {
        short_side,
        long_cap: cap(a.long_cap),
        hflip: a.flip,
    });
    let opts = StubPredictOptions {
        seed: a.seed,
        noise: a.noise,
        model: a.model.filter(|m| m != "none").map(PathBuf::from),
        aug,
    };
    let n = stub::stub_predict(&a.manifest, &a.out, &opts)?;
    eprintln!("wrote {n} predictions");
    Ok(0)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
