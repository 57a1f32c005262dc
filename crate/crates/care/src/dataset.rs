//! Tile files plus a `manifest.json` sidecar.
//!
//! ```text
//! "CAREtile" | u32 version | u32 C | u32 H | u32 W | u32 region length | region
//! f32 input planes (C×H×W) | f32 y_star (H×W)
//! ```

use std::fs;
use std::path::Path;

use care_core::synth::{tile_file_name, Dataset, DatasetManifest, RasterTile, MANIFEST_VERSION};

use crate::binio::{put_f32s, Reader};
use crate::error::{Error, Result};

pub const TILE_MAGIC: &[u8; 8] = b"CAREtile";
pub const TILE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_tile(tile: &RasterTile) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + tile.region.len() + 4 * (tile.input.len() + tile.y_star.len()));
    out.extend_from_slice(TILE_MAGIC);
    for v in [TILE_VERSION, tile.channels as u32, tile.height as u32, tile.width as u32, tile.region.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(tile.region.as_bytes());
    put_f32s(&mut out, &tile.input);
    put_f32s(&mut out, &tile.y_star);
    out
}

/// `tile_id` is not stored in the file; the manifest entry supplies it.
pub fn decode_tile(path: &Path, bytes: &[u8], tile_id: u64) -> Result<RasterTile> {
    let mut r = Reader::new(path, bytes);
    r.magic(TILE_MAGIC)?;
    let version = r.u32("version")?;
    if version != TILE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            kind: "tile",
            found: version,
            supported: TILE_VERSION,
        });
    }
    let c = r.u32("channel count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let n = r.u32("region length")? as usize;
    let region = r.str(n, "region name")?.to_string();
    let plane = h.checked_mul(w).ok_or_else(|| r.error("tile extent overflows"))?;
    let input = r.f32s(c.saturating_mul(plane), "input planes")?;
    let y_star = r.f32s(plane, "density plane")?;
    r.finish()?;
    Ok(RasterTile {
        tile_id,
        region,
        channels: c,
        height: h,
        width: w,
        input,
        y_star,
    })
}

pub fn manifest_json(manifest: &DatasetManifest) -> Result<String> {
    let mut s = serde_json::to_string_pretty(manifest).map_err(|e| Error::config(format!("manifest: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Writes every tile and the manifest; creates `dir` if needed.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (entry, tile) in dataset.manifest.tiles.iter().zip(&dataset.tiles) {
        let path = dir.join(&entry.file);
        fs::write(&path, encode_tile(tile)).map_err(Error::io(&path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_json(&dataset.manifest)?).map_err(Error::io(&path))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::Io {
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest is missing"),
            path,
        });
    }
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        offset: 0,
        msg: format!("manifest JSON line {} column {}: {e}", e.line(), e.column()),
    })?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            path,
            kind: "manifest",
            found: manifest.format_version,
            supported: MANIFEST_VERSION,
        });
    }
    Ok(manifest)
}

/// Loads the tiles listed in the manifest, in manifest order. Other files are ignored.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let spec = &manifest.dataset;
    let mut tiles = Vec::with_capacity(manifest.tiles.len());
    for entry in &manifest.tiles {
        if entry.file.contains(['/', '\\']) || entry.file != tile_file_name(entry.tile_id) {
            return Err(Error::config(format!("manifest entry {} names an unexpected file {:?}", entry.tile_id, entry.file)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        let tile = decode_tile(&path, &bytes, entry.tile_id)?;
        if (tile.channels, tile.height, tile.width) != (spec.channels, spec.height, spec.width) || tile.region != entry.region {
            return Err(Error::Format {
                path,
                offset: 8,
                msg: format!(
                    "tile is {}×{}×{} of region {:?}, manifest expects {}×{}×{} of {:?}",
                    tile.channels, tile.height, tile.width, tile.region, spec.channels, spec.height, spec.width, entry.region
                ),
            });
        }
        tiles.push(tile);
    }
    Ok(Dataset { manifest, tiles })
}
