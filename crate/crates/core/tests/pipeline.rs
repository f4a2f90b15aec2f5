mod common;

use std::fs;

use common::{read_json, tree_digest, vtk, Fixture};
use vtk::manifest::{load_manifest, stats, LabelSource};
use vtk::selftrain::{load_state, Pipeline, PipelineConfig, PipelineError, Status, StepId, STEP_ORDER};

fn pipeline(cfg: &std::path::Path, workers: usize) -> Pipeline {
    Pipeline::new(PipelineConfig::load(cfg).unwrap(), workers).unwrap()
}

#[test]
fn full_run_completes_with_expected_provenance() {
    let fx = Fixture::new();
    let cfg = fx.config("cfg.json", "run", None);
    let p = pipeline(&cfg, 2);
    let state = p.run_all(false).unwrap();
    assert_eq!(state.status, Status::Done);
    assert_eq!(state.completed_steps, STEP_ORDER.to_vec());
    assert_eq!(state.current_round, 3);

    let val = load_manifest(&fx.ds.val).unwrap();
    let s3 = stats(&load_manifest(&p.step_dir(StepId::S3).join("manifest.json")).unwrap());
    assert_eq!(s3.get(LabelSource::Pseudo(1)).entries, val.entries.len());
    assert_eq!(s3.get(LabelSource::Pseudo(1)).frames, val.frame_count());

    let s5 = stats(&load_manifest(&p.step_dir(StepId::S5).join("manifest.json")).unwrap());
    assert!(s5.ground_truth().entries > 0);
    assert!(s5.get(LabelSource::Pseudo(2)).entries > 0);
    assert!(s5.get(LabelSource::Pseudo(3)).entries > 0);
    assert_eq!(s5.get(LabelSource::Pseudo(1)).entries, 0);
    assert_eq!(s5.unlabeled().entries, 0);

    for step in ["s2", "s4", "s5", "s6"] {
        assert!(p.work_dir().join(step).join("report.json").is_file(), "{step}");
    }
    for tag in ["s16_f0", "s16_f1", "s24_f0", "s24_f1", "s32_f0", "s32_f1"] {
        assert!(p.work_dir().join("s6/pred").join(tag).is_dir(), "{tag}");
    }
}

#[test]
fn later_rounds_do_not_regress_on_val() {
    let fx = Fixture::new();
    let p = pipeline(&fx.config("cfg.json", "run", None), 4);
    p.run_all(false).unwrap();
    let jf = |s: &str| read_json(&p.work_dir().join(s).join("report.json"))["JF"].as_f64().unwrap();
    assert!(jf("s4") >= jf("s2"), "s4 {} < s2 {}", jf("s4"), jf("s2"));
}

#[test]
fn resume_after_interruption_matches_uninterrupted_run() {
    let fx = Fixture::new();
    let whole = pipeline(&fx.config("a.json", "run_a", None), 1);
    whole.run_all(false).unwrap();

    let split = pipeline(&fx.config("b.json", "run_b", None), 3);
    let mut state = split.plan().unwrap();
    vtk::selftrain::persist_state(&state, split.work_dir()).unwrap();
    for _ in 0..3 {
        state = split.run_step(state).unwrap();
    }
    assert_eq!(load_state(split.work_dir()).unwrap().completed_steps.len(), 3);
    // a crash mid-S4 leaves debris behind
    fs::create_dir_all(split.work_dir().join("s4/pred/junk")).unwrap();
    fs::write(split.work_dir().join("s4/pred/junk/x.pfm"), b"garbage").unwrap();
    let s1_model = fs::read(split.work_dir().join("s1/model/model.json")).unwrap();

    let state = split.run_all(true).unwrap();
    assert_eq!(state.status, Status::Done);
    assert_eq!(fs::read(split.work_dir().join("s1/model/model.json")).unwrap(), s1_model);
    assert_eq!(tree_digest(whole.work_dir()), tree_digest(split.work_dir()));
}

#[test]
fn failure_halts_and_resume_keeps_completed_steps() {
    let fx = Fixture::new();
    let marker = fx.root().join("fail.marker");
    let p = pipeline(&fx.config("cfg.json", "run", Some(&marker)), 1);
    let mut state = p.plan().unwrap();
    vtk::selftrain::persist_state(&state, p.work_dir()).unwrap();
    state = p.run_step(state).unwrap();
    state = p.run_step(state).unwrap();
    let before = tree_digest(&p.work_dir().join("s2"));

    fs::write(&marker, "").unwrap();
    let halted = p.run_all(true).unwrap();
    match &halted.status {
        Status::Halted { step, stderr, .. } => {
            assert_eq!(*step, StepId::S3);
            let log = fs::read_to_string(p.work_dir().join(stderr.as_ref().unwrap())).unwrap();
            assert!(log.contains("failure requested"));
        }
        other => panic!("expected halt, got {other:?}"),
    }
    assert_eq!(halted.completed_steps, vec![StepId::S1, StepId::S2]);
    assert_eq!(load_state(p.work_dir()).unwrap(), halted);
    drop(state);

    fs::remove_file(&marker).unwrap();
    let done = p.run_all(true).unwrap();
    assert_eq!(done.status, Status::Done);
    assert_eq!(tree_digest(&p.work_dir().join("s2")), before);
}

#[test]
fn state_guards() {
    let fx = Fixture::new();
    let cfg = fx.config("cfg.json", "run", None);
    let p = pipeline(&cfg, 1);
    assert!(matches!(p.run_all(true), Err(PipelineError::NoState(_))));
    p.run_all(false).unwrap();
    assert!(matches!(p.run_all(false), Err(PipelineError::StateExists(_))));
    // finished pipelines resume as a no-op
    let digest = tree_digest(p.work_dir());
    assert_eq!(p.run_all(true).unwrap().status, Status::Done);
    assert_eq!(tree_digest(p.work_dir()), digest);

    let mut changed = PipelineConfig::load(&cfg).unwrap();
    changed.seed += 1;
    let q = Pipeline::new(changed, 1).unwrap();
    assert!(matches!(q.run_all(true), Err(PipelineError::ConfigChanged { .. })));
}

#[test]
fn extra_round_epochs_add_val_rerounds() {
    let fx = Fixture::new();
    let cfg = fx.config("cfg.json", "run", None);
    let mut c = PipelineConfig::load(&cfg).unwrap();
    c.round_epochs = vec![1, 1, 1, 1, 2];
    let p = Pipeline::new(c, 2).unwrap();
    let state = p.run_all(false).unwrap();
    assert_eq!(state.status, Status::Done);
    assert!(p.work_dir().join("s4/round3/model/model.json").is_file());
    assert_eq!(state.current_round, 4);
    let s5 = stats(&load_manifest(&p.step_dir(StepId::S5).join("manifest.json")).unwrap());
    assert!(s5.get(LabelSource::Pseudo(3)).entries > 0);
    assert!(s5.get(LabelSource::Pseudo(4)).entries > 0);
}

#[test]
fn cli_exit_codes_for_pipeline() {
    let fx = Fixture::new();
    let marker = fx.root().join("fail.marker");
    fs::write(&marker, "").unwrap();
    let cfg = fx.config("cfg.json", "run", Some(&marker));
    let cfg = cfg.to_str().unwrap();
    let out = vtk(&["pipeline", "run", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("halted at S1"));
    fs::remove_file(&marker).unwrap();
    let out = vtk(&["pipeline", "run", "--config", cfg, "--resume", "--workers", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
