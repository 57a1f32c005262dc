//! Grayscale panel export: binary PGM (P5, maxval 255) plus `maps.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use care_core::eval::{min_max, predict, MapPanels};
use care_core::synth::Dataset;
use care_core::train::Checkpoint;
use serde::Serialize;

use crate::error::{Error, Result};

pub const SIDECAR: &str = "maps.json";

/// `P5` image with values clamped to `[0, 1]` and mapped linearly onto 0..=255.
pub fn encode_pgm(values: &[f32], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(values.len(), height * width, "panel size does not match its extent");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelInfo {
    pub file: String,
    pub min: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapSidecar {
    pub tile_id: u64,
    pub region: String,
    pub model: String,
    pub height: usize,
    pub width: usize,
    pub panels: BTreeMap<String, PanelInfo>,
}

/// Writes the five panels of one tile into `out_dir`.
pub fn export_maps(ck: &Checkpoint, dataset: &Dataset, tile_id: u64, out_dir: &Path) -> Result<MapSidecar> {
    let tile = dataset
        .tile(tile_id)
        .ok_or_else(|| Error::config(format!("tile {tile_id} is not in the dataset")))?;
    let p = predict(ck, &[tile], &dataset.manifest.stats, 1)?;
    let panels = MapPanels::new(&p.y, &p.y_star, &p.c)?;
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let mut info = BTreeMap::new();
    for (stem, values) in panels.panels() {
        let file = format!("{stem}.pgm");
        let path = out_dir.join(&file);
        fs::write(&path, encode_pgm(values, tile.height, tile.width)).map_err(Error::io(&path))?;
        let (min, max) = min_max(values);
        info.insert(stem.to_string(), PanelInfo { file, min, max });
    }
    let sidecar = MapSidecar {
        tile_id,
        region: tile.region.clone(),
        model: ck.model_id(),
        height: tile.height,
        width: tile.width,
        panels: info,
    };
    let path = out_dir.join(SIDECAR);
    let mut json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::config(e.to_string()))?;
    json.push('\n');
    fs::write(&path, json).map_err(Error::io(&path))?;
    Ok(sidecar)
}
