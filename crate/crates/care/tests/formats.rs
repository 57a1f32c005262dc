mod common;

use std::fs;

use care::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use care::config::RunConfig;
use care::dataset::{decode_tile, encode_tile, read_dataset, write_dataset, MANIFEST_FILE};
use care::maps::encode_pgm;
use care::report::{read_reports, reports_csv, write_reports};
use care::Error;
use care_core::eval::{evaluate_maps, EvalConfig};
use care_core::model::ModelConfig;
use care_core::synth::{build_dataset, channel_stats, Split};
use care_core::train::{train, Baseline, Checkpoint, TrainConfig};
use common::mini_spec;

fn tiny_checkpoint(baseline: Baseline) -> Checkpoint {
    let ds = build_dataset(&mini_spec()).unwrap();
    let tiles = ds.split(Split::Train);
    let cfg = TrainConfig {
        baseline,
        phase0_epochs: 1,
        phase1_epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        head: baseline.head(),
        base_width: 4,
        ..ModelConfig::default()
    };
    train(&tiles, &ds.manifest.stats, &model, &cfg).unwrap()
}

#[test]
fn tile_round_trip_is_bit_exact() {
    let ds = build_dataset(&mini_spec()).unwrap();
    let path = std::path::Path::new("t.bin");
    for tile in &ds.tiles {
        let bytes = encode_tile(tile);
        let back = decode_tile(path, &bytes, tile.tile_id).unwrap();
        assert_eq!(&back, tile);
        assert_eq!(encode_tile(&back), bytes);
    }
}

#[test]
fn tile_errors_name_offsets() {
    let ds = build_dataset(&mini_spec()).unwrap();
    let bytes = encode_tile(&ds.tiles[0]);
    let path = std::path::Path::new("t.bin");
    match decode_tile(path, &bytes[..bytes.len() - 3], 0) {
        Err(Error::Format { offset, msg, .. }) => {
            assert!(offset > 0 && msg.contains("truncated"), "{offset} {msg}")
        }
        other => panic!("{other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_tile(path, &bad, 0), Err(Error::Format { offset: 0, .. })));
    let mut newer = bytes;
    newer[8..12].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(decode_tile(path, &newer, 0), Err(Error::UnsupportedVersion { found: 2, .. })));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_dataset(&mini_spec()).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    fs::write(dir.path().join("notes.txt"), "not a tile").unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);

    let stats = channel_stats(back.split(Split::Train), back.manifest.dataset.channels);
    for (a, b) in stats.means.iter().chain(&stats.stds).zip(ds.manifest.stats.means.iter().chain(&ds.manifest.stats.stds)) {
        assert!((a - b).abs() < 1e-6);
    }

    fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("manifest"), "{err}");
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for baseline in [Baseline::Care, Baseline::GaussianNll, Baseline::Ensemble(3)] {
        let ck = tiny_checkpoint(baseline);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ck, &p1).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        assert_eq!(back.members.len(), ck.members.len());
        assert_eq!(back.log, ck.log);
        for (a, b) in back.members.iter().zip(&ck.members) {
            assert_eq!(a.params(), b.params());
        }
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}

#[test]
fn checkpoint_rejects_truncation_and_newer_versions() {
    let ck = tiny_checkpoint(Baseline::Care);
    let bytes = encode_checkpoint(&ck).unwrap();
    let path = std::path::Path::new("m.ckpt");
    for cut in [4, 14, 40, bytes.len() - 1] {
        match decode_checkpoint(path, &bytes[..cut]) {
            Err(e @ Error::Format { .. }) => assert!(e.to_string().contains("byte")),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&9u32.to_le_bytes());
    let err = decode_checkpoint(path, &newer).unwrap_err();
    assert!(matches!(err, Error::UnsupportedVersion { found: 9, supported: 1, .. }), "{err}");
    let mut extra = bytes;
    extra.push(0);
    assert!(decode_checkpoint(path, &extra).is_err());
}

#[test]
fn report_csv_schema_and_round_trip() {
    let y = [0.2f32, 0.5, 0.9, 0.4];
    let t = [0.25f32, 0.5, 0.7, 0.1];
    let c = [0.9f32, 1.0, 0.5, 0.95];
    let mut r = evaluate_maps("care", &y, &t, &c, &EvalConfig::default()).unwrap();
    r.n = Some(50);
    let text = reports_csv(std::slice::from_ref(&r)).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "model,n,err_mean,err_median,mse,mse_20,frac_20,mse_10,frac_10,pearson_r"
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_reports(std::slice::from_ref(&r), &path).unwrap();
    let back = read_reports(&path).unwrap();
    assert_eq!(back.len(), 1);
    let b = &back[0];
    assert_eq!((b.model.as_str(), b.n, b.mse, b.pearson_r), ("care", Some(50), r.mse, r.pearson_r));
    assert_eq!(b.at_zeta, r.at_zeta);

    let cfg = EvalConfig {
        zeta_list: vec![0.5],
        ..EvalConfig::default()
    };
    let flat = evaluate_maps("flat", &y, &t, &[0.0; 4], &cfg).unwrap();
    let text = reports_csv(&[flat]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "model,n,err_mean,err_median,mse,mse_50,frac_50,pearson_r");
    // nothing retained and constant uncertainty: both undefined, written empty
    let row = lines.next().unwrap();
    assert!(row.starts_with("flat,,") && row.ends_with(",,0,"), "{row}");
}

#[test]
fn pgm_layout() {
    let img = encode_pgm(&[0.0, 0.5, 1.0, 2.0, -1.0, 0.25], 2, 3);
    let header = b"P5\n3 2\n255\n";
    assert_eq!(&img[..header.len()], header);
    assert_eq!(&img[header.len()..], &[0, 128, 255, 255, 0, 64]);
}

#[test]
fn run_config_rejects_unknown_keys() {
    assert!(RunConfig::from_json(r#"{"train": {"eta": 0.5}}"#).is_ok());
    let err = RunConfig::from_json(r#"{"train": {"etaa": 0.5}}"#).unwrap_err();
    assert!(err.to_string().contains("etaa"));
    assert_eq!(err.exit_code(), 2);
    assert!(RunConfig::from_json(r#"{"colour": 1}"#).is_err());
}
