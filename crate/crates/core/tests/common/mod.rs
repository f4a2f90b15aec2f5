#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use vtk::stub::{generate_dataset, SynthConfig, SynthDataset};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_vtk")
}

pub fn vtk(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub ds: SynthDataset,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&dir.path().join("data"), &SynthConfig::default()).unwrap();
        Self { dir, ds }
    }

    pub fn root(&self) -> PathBuf {
        self.ds.root.clone()
    }

    /// Writes a stub-driven pipeline config and returns its path.
    pub fn config(&self, name: &str, work_dir: &str, fail_marker: Option<&Path>) -> PathBuf {
        let mut train = vec![
            bin().to_string(),
            "stub-train".into(),
            "--manifest".into(),
            "{manifest}".into(),
            "--schedule".into(),
            "{schedule}".into(),
            "--out".into(),
            "{out_dir}".into(),
            "--round".into(),
            "{round}".into(),
        ];
        if let Some(m) = fail_marker {
            train.push("--fail-marker".into());
            train.push(m.display().to_string());
        }
        let cfg = json!({
            "train_manifest": "train.json",
            "val_manifest": "val.json",
            "test_manifest": "test.json",
            "val_gt_manifest": "val_gt.json",
            "test_gt_manifest": "test_gt.json",
            "train_cmd": train,
            "predict_cmd": [
                bin(), "stub-predict", "--manifest", "{manifest}", "--out", "{out_dir}",
                "--model", "{model}", "--seed", "{seed}", "--noise", "0.3",
                "--scale", "{scales}", "--flip", "{flip}", "--long-cap", "{long_cap}"
            ],
            "clr": {"frames_per_iter": 4},
            "tta_scales": [16, 24, 32],
            "tta_flip": true,
            "work_dir": work_dir,
            "seed": 7
        });
        let path = self.root().join(name);
        fs::write(&path, vtk::canonical_json(&cfg)).unwrap();
        path
    }
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// sha256 of every file under `root`, keyed by relative path, skipping
/// `state.json` and `log/` directories.
pub fn tree_digest(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
            if path.is_dir() {
                if path.file_name().unwrap() != "log" {
                    stack.push(path);
                }
            } else if rel != "state.json" {
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
            }
        }
    }
    out
}
