//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails or exceeds its time budget.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{read_json, tree_digest, Fixture};
use vtk::clr::{lr_at, schedule, ScheduleSpec};
use vtk::geometry::{hflip_prob, target_dims};
use vtk::manifest::{load_manifest, save_manifest, stats, LabelSource, ProvenanceStats};
use vtk::metrics::{boundary_f, jaccard, rank_table};
use vtk::raster::{read_mask, read_pfm, write_mask, write_pfm};
use vtk::selftrain::{persist_state, Pipeline, PipelineConfig, Status, StepId, STEP_ORDER};
use vtk::tta::{fuse, invert, AugmentationSpec, AugmentedOutput};
use vtk::{BinaryMask, Dims, ProbMap};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check, Duration);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn table_consistency() -> Check {
    // name, J, F, published J&F, in published order
    let published = [
        ("Bo____", 62.2, 66.1, 64.1),
        ("jiliushi (Ours)", 59.8, 63.6, 61.7),
        ("PENG", 58.9, 62.7, 60.8),
        ("ds-hohhot", 57.9, 61.2, 59.6),
        ("JQK", 57.7, 61.1, 59.4),
        ("nero", 56.1, 59.9, 58.0),
    ];
    let mut shuffled = published.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let ranked = rank_table(shuffled.iter().map(|(n, j, f, _)| (n.to_string(), *j, *f)));
    for (row, (name, _, _, jf)) in ranked.iter().zip(&published) {
        ensure!(row.name == *name, "expected {name} at this rank, got {}", row.name);
        ensure!((row.jf - jf).abs() <= 0.06, "{name}: J&F {} vs published {jf}", row.jf);
    }
    ensure!(ranked[1].name == "jiliushi (Ours)", "second place is {}", ranked[1].name);
    Ok(())
}

fn random_mask(rng: &mut impl Rng, dims: Dims) -> BinaryMask {
    match rng.gen_range(0..4) {
        0 => BinaryMask::from_fn(dims, |_, _| rng.gen_bool(0.3)),
        1 => BinaryMask::zeros(dims),
        _ => {
            let rects: Vec<(usize, usize, usize, usize)> = (0..rng.gen_range(1..4))
                .map(|_| {
                    let x0 = rng.gen_range(0..dims.width);
                    let y0 = rng.gen_range(0..dims.height);
                    (x0, y0, rng.gen_range(x0..=dims.width), rng.gen_range(y0..=dims.height))
                })
                .collect();
            BinaryMask::from_fn(dims, |x, y| {
                rects.iter().any(|&(x0, y0, x1, y1)| x >= x0 && x < x1 && y >= y0 && y < y1)
            })
        }
    }
}

fn oracle_jaccard(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let pixels = |m: &BinaryMask| -> BTreeSet<(usize, usize)> {
        (0..m.height())
            .flat_map(|y| (0..m.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| m.get(x, y))
            .collect()
    };
    let (pa, pb) = (pixels(a), pixels(b));
    let union = pa.union(&pb).count();
    if union == 0 {
        1.0
    } else {
        pa.intersection(&pb).count() as f64 / union as f64
    }
}

fn oracle_boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !fg(x + dx, y + dy)) {
                out.push((x, y));
            }
        }
    }
    out
}

fn oracle_f(pred: &BinaryMask, gt: &BinaryMask, bound_frac: f64) -> f64 {
    let (bp, bg) = (oracle_boundary(pred), oracle_boundary(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let diag = ((pred.width().pow(2) + pred.height().pow(2)) as f64).sqrt();
    let r = (bound_frac * diag).ceil();
    let near = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .any(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt() <= r)
    };
    let precision = bp.iter().filter(|p| near(p, &bg)).count() as f64 / bp.len() as f64;
    let recall = bg.iter().filter(|q| near(q, &bp)).count() as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = Dims::new(32, 32);
    for i in 0..250 {
        let (a, b) = (random_mask(&mut rng, dims), random_mask(&mut rng, dims));
        let got = jaccard(&a, &b).map_err(|e| e.to_string())?;
        ensure!(got == oracle_jaccard(&a, &b), "jaccard pair {i}: {got} != {}", oracle_jaccard(&a, &b));
    }
    let empty = BinaryMask::zeros(dims);
    let square = BinaryMask::from_fn(dims, |x, y| (8..20).contains(&x) && (8..20).contains(&y));
    let mut pairs = vec![(empty.clone(), empty.clone()), (empty.clone(), square.clone()), (square, empty)];
    pairs.extend((0..150).map(|_| (random_mask(&mut rng, dims), random_mask(&mut rng, dims))));
    for (i, (p, g)) in pairs.iter().enumerate() {
        for frac in [0.008, 0.05] {
            let got = boundary_f(p, g, frac).map_err(|e| e.to_string())?;
            let want = oracle_f(p, g, frac);
            ensure!((got - want).abs() <= 1e-9, "boundary_f pair {i} frac {frac}: {got} vs {want}");
        }
    }
    ensure!(boundary_f(&pairs[0].0, &pairs[0].1, 0.008).unwrap() == 1.0, "both empty must give 1");
    ensure!(boundary_f(&pairs[1].0, &pairs[1].1, 0.008).unwrap() == 0.0, "one empty must give 0");
    Ok(())
}

fn clr_schedule() -> Check {
    let (lo, hi, n) = (1e-7, 1e-5, 1000u64);
    let spec = ScheduleSpec::new(lo, hi, n, 3).map_err(|e| e.to_string())?;
    let lrs = schedule(&spec).map_err(|e| e.to_string())?;
    ensure!(lrs.len() == 3000, "length {}", lrs.len());
    for i in [0, 1000, 2000] {
        ensure!(lrs[i] == lo, "iter {i} is {} not the minimum", lrs[i]);
    }
    for i in [500, 1500, 2500] {
        ensure!(lrs[i] == hi, "iter {i} is {} not the maximum", lrs[i]);
    }
    ensure!(lrs.iter().all(|&v| (lo..=hi).contains(&v)), "value outside bounds");
    for i in 0..2000 {
        ensure!(lrs[i] == lrs[i + 1000], "period broken at {i}");
    }
    for i in 1..lrs.len() - 1 {
        let phase = i as u64 % n;
        if phase == 0 || phase == n / 2 {
            continue;
        }
        let second = lrs[i + 1] - 2.0 * lrs[i] + lrs[i - 1];
        ensure!(second.abs() <= 1e-12 * hi, "curvature {second} at {i}");
    }
    ensure!(lr_at(&spec, 3000).is_err(), "iteration past the end accepted");
    Ok(())
}

fn random_prob(rng: &mut impl Rng, dims: Dims) -> ProbMap {
    ProbMap::new(dims.width, dims.height, (0..dims.area()).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn tta_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let err = |e: vtk::tta::TtaError| e.to_string();
    for _ in 0..50 {
        let orig = Dims::new(rng.gen_range(4..40), rng.gen_range(4..40));
        let identity = AugmentationSpec {
            short_side: orig.short_side(),
            long_cap: None,
            hflip: false,
        };
        ensure!(identity.output_dims(orig) == orig, "identity changes geometry of {orig}");
        let p = random_prob(&mut rng, orig);
        let fused = fuse(&[AugmentedOutput { spec: identity, prob: p.clone() }], orig, 0.5).map_err(err)?;
        ensure!(fused == p.threshold(0.5), "single identity fuse differs from threshold");

        ensure!(hflip_prob(&hflip_prob(&p)) == p, "flip is not an involution");

        let mut outputs: Vec<AugmentedOutput> = (0..5)
            .map(|k| {
                let spec = AugmentationSpec {
                    short_side: 8 + 6 * (k / 2),
                    long_cap: None,
                    hflip: k % 2 == 1,
                };
                let prob = random_prob(&mut rng, spec.output_dims(orig));
                AugmentedOutput { spec, prob }
            })
            .collect();
        let reference = fuse(&outputs, orig, 0.5).map_err(err)?;
        for _ in 0..5 {
            outputs.shuffle(&mut rng);
            ensure!(fuse(&outputs, orig, 0.5).map_err(err)? == reference, "fuse depends on input order");
        }

        let c = rng.gen::<f32>();
        let spec = outputs[0].spec;
        let constant = ProbMap::constant(spec.output_dims(orig), c).unwrap();
        let back = invert(&AugmentedOutput { spec, prob: constant }, orig).map_err(err)?;
        ensure!(back.dims() == orig && back.data().iter().all(|&v| v == c), "invert altered a constant map");
    }
    let plain = target_dims(Dims::new(640, 360), 288, None);
    ensure!(plain == Dims::new(512, 288), "640x360 @288 gave {plain}");
    let capped = target_dims(Dims::new(1600, 400), 720, Some(1280));
    ensure!(capped == Dims::new(1280, 320), "1600x400 @720 cap 1280 gave {capped}");
    Ok(())
}

fn expect_counts(s: &ProvenanceStats, src: LabelSource, entries: usize, frames: usize, at: &str) -> Check {
    let got = s.get(src);
    ensure!(
        got.entries == entries && got.frames == frames,
        "{at}: {src:?} has {}/{} entries/frames, expected {entries}/{frames}",
        got.entries,
        got.frames
    );
    Ok(())
}

fn pipeline_end_to_end() -> Check {
    let err = |e: vtk::selftrain::PipelineError| e.to_string();
    let fx = Fixture::new();
    let train = load_manifest(&fx.ds.train).unwrap();
    let val = load_manifest(&fx.ds.val).unwrap();
    let test = load_manifest(&fx.ds.test).unwrap();
    let videos: BTreeSet<_> = [&train, &val, &test]
        .iter()
        .flat_map(|m| m.entries.iter().map(|e| e.video_id.clone()))
        .collect();
    let expressions = train.entries.len() + val.entries.len() + test.entries.len();
    ensure!(videos.len() == 5 && expressions == 10, "fixture has {} videos, {expressions} expressions", videos.len());

    let load = |name: &str, work: &str, marker: Option<&std::path::Path>| {
        Pipeline::new(PipelineConfig::load(&fx.config(name, work, marker)).unwrap(), 2).unwrap()
    };
    let whole = load("a.json", "run_a", None);
    let state = whole.run_all(false).map_err(err)?;
    ensure!(state.status == Status::Done, "status {:?}", state.status);
    ensure!(state.completed_steps == STEP_ORDER.to_vec(), "steps {:?}", state.completed_steps);

    let step_stats = |p: &Pipeline, step: StepId| stats(&load_manifest(&p.step_dir(step).join("manifest.json")).unwrap());
    let s3 = step_stats(&whole, StepId::S3);
    expect_counts(&s3, LabelSource::GroundTruth, train.entries.len(), train.frame_count(), "S3")?;
    expect_counts(&s3, LabelSource::Pseudo(1), val.entries.len(), val.frame_count(), "S3")?;
    ensure!(s3.unlabeled().entries == 0, "S3 trains on unlabeled entries");
    ensure!(s3.pseudo_total().entries == val.entries.len(), "S3 has extra pseudo rounds");
    let s5 = step_stats(&whole, StepId::S5);
    expect_counts(&s5, LabelSource::GroundTruth, train.entries.len(), train.frame_count(), "S5")?;
    expect_counts(&s5, LabelSource::Pseudo(2), val.entries.len(), val.frame_count(), "S5")?;
    expect_counts(&s5, LabelSource::Pseudo(3), test.entries.len(), test.frame_count(), "S5")?;
    ensure!(
        s5.pseudo_total().entries == val.entries.len() + test.entries.len() && s5.unlabeled().entries == 0,
        "S5 has unexpected buckets"
    );

    // interrupted after S3, resumed in a fresh process-equivalent
    let split = load("b.json", "run_b", None);
    let mut st = split.plan().map_err(err)?;
    persist_state(&st, split.work_dir()).map_err(err)?;
    for _ in 0..3 {
        st = split.run_step(st).map_err(err)?;
    }
    drop(st);
    let resumed = load("b.json", "run_b", None).run_all(true).map_err(err)?;
    ensure!(resumed.status == Status::Done, "resume ended {:?}", resumed.status);
    ensure!(
        tree_digest(whole.work_dir()) == tree_digest(split.work_dir()),
        "resumed artifacts differ from the uninterrupted run"
    );

    // failing trainer
    let marker = fx.root().join("fail.marker");
    let failing = load("c.json", "run_c", Some(&marker));
    let mut st = failing.plan().map_err(err)?;
    persist_state(&st, failing.work_dir()).map_err(err)?;
    st = failing.run_step(st).map_err(err)?;
    st = failing.run_step(st).map_err(err)?;
    let kept = tree_digest(&failing.step_dir(StepId::S2));
    drop(st);
    fs::write(&marker, "").unwrap();
    let halted = failing.run_all(true).map_err(err)?;
    ensure!(
        matches!(halted.status, Status::Halted { step: StepId::S3, .. }),
        "expected halt at S3, got {:?}",
        halted.status
    );
    ensure!(halted.completed_steps == [StepId::S1, StepId::S2], "lost steps: {:?}", halted.completed_steps);
    fs::remove_file(&marker).unwrap();
    let done = failing.run_all(true).map_err(err)?;
    ensure!(done.status == Status::Done, "resume after failure ended {:?}", done.status);
    ensure!(tree_digest(&failing.step_dir(StepId::S2)) == kept, "completed step was rewritten");
    ensure!(
        tree_digest(failing.work_dir()) == tree_digest(whole.work_dir()),
        "halted-then-resumed run differs from the uninterrupted run"
    );
    Ok(())
}

fn stub_improvement() -> Check {
    let fx = Fixture::new();
    let p = Pipeline::new(PipelineConfig::load(&fx.config("cfg.json", "run", None)).unwrap(), 4).unwrap();
    p.run_all(false).map_err(|e| e.to_string())?;
    let jf = |s: &str| read_json(&p.work_dir().join(s).join("report.json"))["JF"].as_f64().unwrap();
    let (before, after) = (jf("s2"), jf("s4"));
    println!("        val J&F: S1 model {before:.4}, S3 model {after:.4}");
    ensure!(after >= before, "val J&F fell from {before} to {after}");
    Ok(())
}

fn format_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..100 {
        let dims = Dims::new(rng.gen_range(1..64), rng.gen_range(1..64));
        let m = random_mask(&mut rng, dims);
        let path = dir.path().join(format!("{i}.png"));
        write_mask(&m, &path).map_err(|e| e.to_string())?;
        ensure!(read_mask(&path).map_err(|e| e.to_string())? == m, "PNG round trip {i}");
        let p = random_prob(&mut rng, dims);
        let path = dir.path().join(format!("{i}.pfm"));
        write_pfm(&p, &path).map_err(|e| e.to_string())?;
        ensure!(read_pfm(&path).map_err(|e| e.to_string())? == p, "PFM round trip {i}");
    }

    let fx = Fixture::new();
    let p = Pipeline::new(PipelineConfig::load(&fx.config("cfg.json", "run", None)).unwrap(), 2).unwrap();
    let mut st = p.plan().map_err(|e| e.to_string())?;
    for _ in 0..3 {
        st = p.run_step(st).map_err(|e| e.to_string())?;
    }
    let manifests = [
        fx.ds.train.clone(),
        fx.ds.val.clone(),
        fx.ds.val_gt.clone(),
        p.step_dir(StepId::S2).join("manifest.json"),
        p.step_dir(StepId::S3).join("manifest.json"),
    ];
    for path in manifests {
        let original = fs::read_to_string(&path).unwrap();
        let copy = path.with_extension("copy.json");
        save_manifest(&load_manifest(&path).map_err(|e| e.to_string())?, &copy).map_err(|e| e.to_string())?;
        ensure!(fs::read_to_string(&copy).unwrap() == original, "{} changed on load/save", path.display());
    }
    Ok(())
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("1 leaderboard consistency", table_consistency, Duration::from_secs(1)),
        ("2 metric oracle equivalence", metric_oracles, Duration::from_secs(10)),
        ("3 CLR schedule shape", clr_schedule, Duration::from_secs(1)),
        ("4 TTA algebra", tta_algebra, Duration::from_secs(5)),
        ("5 pipeline end-to-end", pipeline_end_to_end, Duration::from_secs(60)),
        ("6 stub improvement", stub_improvement, Duration::from_secs(60)),
        ("7 format round trips", format_round_trips, Duration::from_secs(5)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if elapsed > budget {
                Err(format!("took {elapsed:.2?}, budget {budget:?}"))
            } else {
                Ok(())
            }
        });
        match outcome {
            Ok(()) => println!("[PASS] {name} ({elapsed:.2?})"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name} ({elapsed:.2?}): {why}");
            }
        }
    }
    println!("{} of 7 criteria passed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
