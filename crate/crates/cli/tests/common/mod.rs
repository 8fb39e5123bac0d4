#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_facerig"));
    c.env_remove("FACERIG_CONFIG");
    c
}

/// Runs `facerig` with `args`, returning the raw output.
pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn facerig")
}

/// Runs `facerig` and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "facerig {args:?} exited {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files(&p, base, out);
        } else {
            out.push(p.strip_prefix(base).unwrap().to_path_buf());
        }
    }
}

/// SHA-256 over every relative path and file content under `dir`, in
/// sorted path order.
pub fn hash_tree(dir: &Path) -> String {
    let mut all = Vec::new();
    files(dir, dir, &mut all);
    all.sort();
    let mut h = Sha256::new();
    for rel in all {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = std::fs::read(dir.join(&rel)).unwrap();
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

/// A small model for fast CLI runs at 32×32.
pub const TINY_CONFIG: &str = r#"{
  "model": {
    "resolution": 32,
    "patch_size": 4,
    "dims": [8, 16, 16, 32],
    "depths": [1, 0, 1, 1],
    "heads": [1, 2, 2, 4],
    "head_hidden": 16
  }
}"#;

/// Writes a 12×12 procedural rig and a 32 px, 124-sample dataset.
pub fn rig_and_data(root: &Path) -> (PathBuf, PathBuf) {
    let rig_dir = root.join("rig");
    ok(&["make-rig", "--out", s(&rig_dir), "--grid", "12"]);
    let data = root.join("data");
    let rig = rig_dir.join("rig.json");
    ok(&["gen-data", "--rig", s(&rig), "--out", s(&data), "--seed", "7", "--samples", "124", "--resolution", "32"]);
    (rig, data)
}

pub fn write_config(root: &Path, text: &str) -> PathBuf {
    let p = root.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}
