#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use care_core::synth::{DatasetSpec, RegionSpec};

pub fn mini_spec() -> DatasetSpec {
    DatasetSpec {
        seed: 3,
        height: 16,
        width: 16,
        channels: 4,
        regions: vec![
            RegionSpec::new("north", 4.0, [2, 6], 0.1, 0),
            RegionSpec::new("south", 6.0, [3, 7], 0.2, 1),
        ],
        tiles_per_region: 5,
        ..DatasetSpec::default()
    }
}

pub fn mini_config_json() -> String {
    let spec = serde_json::to_value(mini_spec()).unwrap();
    serde_json::json!({
        "dataset": spec,
        "train": { "phase0_epochs": 1, "phase1_epochs": 1, "batch_size": 2 }
    })
    .to_string()
}

pub fn care(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_care")).args(args).output().expect("care binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stdout), stderr(o));
}

/// Sorted `(file name, bytes)` of a directory.
pub fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

/// Generates the mini dataset into `root/data` via the CLI.
pub fn gen_mini(root: &Path) -> PathBuf {
    let cfg = root.join("config.json");
    fs::write(&cfg, mini_config_json()).unwrap();
    let data = root.join("data");
    assert_ok(&care(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    data
}
