//! Procedural multi-band rasters with a known building-density target.
//!
//! Each tile is a random set of axis-aligned "buildings" (a binary mask).
//! The target density is the in-bounds average of the mask over a 7x7
//! window. Input bands, in order:
//!
//! 0. `0.8 * mask + noise`
//! 1. `0.6 * (1 - mask) * texture + noise` (smooth sinusoidal vegetation)
//! 2. region constant `+ noise` (nuisance band)
//! 3. `blur3(density) + noise * (0.5 + density)`, noisier where dense
//!
//! Extra bands past the fourth are pure noise around zero.
//!
//! Tiles are a pure function of `(global seed, region name, tile id)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DENSITY_WINDOW: usize = 7;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    /// Expected rectangles per tile (Poisson mean).
    pub building_rate: f64,
    /// Inclusive side-length range of a rectangle, in pixels.
    pub size_range: [usize; 2],
    pub noise_sigma: f64,
    /// Added to the Poisson draw; the count is floored at zero.
    pub density_bias: i32,
}

impl RegionSpec {
    pub fn new(name: &str, building_rate: f64, size_range: [usize; 2], noise_sigma: f64, density_bias: i32) -> Self {
        Self {
            name: name.into(),
            building_rate,
            size_range,
            noise_sigma,
            density_bias,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let field = |f: &str| format!("region {:?}: {f}", self.name);
        if self.name.is_empty() {
            return Err(Error::config("region name must not be empty"));
        }
        if !(self.building_rate >= 0.0) || !self.building_rate.is_finite() {
            return Err(Error::config(field("building_rate must be finite and >= 0")));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config(field("noise_sigma must be finite and >= 0")));
        }
        let [lo, hi] = self.size_range;
        if lo == 0 || lo > hi || hi > height.min(width) {
            return Err(Error::config(field("size_range must satisfy 1 <= min <= max <= tile extent")));
        }
        Ok(())
    }
}

/// Fourteen synthetic regions with distinct building statistics.
pub fn default_regions() -> Vec<RegionSpec> {
    vec![
        RegionSpec::new("harbor", 34.0, [5, 10], 0.02, -1),
        RegionSpec::new("savanna", 35.0, [6, 11], 0.02, 0),
        RegionSpec::new("delta", 36.0, [5, 12], 0.02, 1),
        RegionSpec::new("highland", 37.0, [6, 13], 0.02, -1),
        RegionSpec::new("riverbank", 34.0, [5, 10], 0.02, 0),
        RegionSpec::new("coastal", 35.0, [6, 11], 0.02, 1),
        RegionSpec::new("plateau", 36.0, [5, 12], 0.02, -1),
        RegionSpec::new("archipelago", 37.0, [6, 13], 0.02, 0),
        RegionSpec::new("floodplain", 34.0, [5, 10], 0.02, 1),
        // heavily degraded inputs: the density is barely observable here
        RegionSpec::new("prairie", 21.0, [6, 11], 1.5, -1),
        RegionSpec::new("lagoon", 22.0, [5, 12], 1.5, 0),
        RegionSpec::new("pampas", 23.0, [6, 13], 1.5, 1),
        RegionSpec::new("rift", 20.0, [5, 10], 1.5, -1),
        RegionSpec::new("lakeshore", 21.0, [6, 11], 1.5, 0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("split.train", self.train), ("split.val", self.val), ("split.test", self.test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split.train + split.val + split.test must equal 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` tile counts for a region of `n` tiles.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = (libm::round(self.train * n as f64) as usize).min(n);
        let val = (libm::round(self.val * n as f64) as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Generation parameters for a whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub regions: Vec<RegionSpec>,
    pub tiles_per_region: usize,
    pub split: SplitFractions,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            channels: 4,
            regions: default_regions(),
            tiles_per_region: 100,
            split: SplitFractions::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < DENSITY_WINDOW || self.width < DENSITY_WINDOW {
            return Err(Error::config(format!(
                "dataset.height and dataset.width must be >= {DENSITY_WINDOW}"
            )));
        }
        if self.channels < 1 {
            return Err(Error::config("dataset.channels must be >= 1"));
        }
        if self.regions.is_empty() {
            return Err(Error::config("dataset.regions must not be empty"));
        }
        if self.tiles_per_region < 1 {
            return Err(Error::config("dataset.tiles_per_region must be >= 1"));
        }
        for (i, r) in self.regions.iter().enumerate() {
            r.validate(self.height, self.width)?;
            if self.regions[..i].iter().any(|o| o.name == r.name) {
                return Err(Error::config(format!("duplicate region name {:?}", r.name)));
            }
        }
        self.split.validate()
    }

    pub fn tile_id(&self, region_index: usize, i: usize) -> u64 {
        (region_index * self.tiles_per_region + i) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileEntry {
    pub tile_id: u64,
    pub region: String,
    pub split: Split,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Everything needed to locate, split and normalize a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset: DatasetSpec,
    /// Computed on the train split only.
    pub stats: ChannelStats,
    pub tiles: Vec<TileEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &TileEntry> {
        self.tiles.iter().filter(move |t| t.split == split)
    }

    pub fn entry(&self, tile_id: u64) -> Option<&TileEntry> {
        self.tiles.iter().find(|t| t.tile_id == tile_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterTile {
    pub tile_id: u64,
    pub region: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels × height × width`, row-major.
    pub input: Vec<f32>,
    /// `height × width`, values in [0, 1].
    pub y_star: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Same order as `manifest.tiles`.
    pub tiles: Vec<RasterTile>,
}

impl Dataset {
    pub fn tile(&self, tile_id: u64) -> Option<&RasterTile> {
        self.tiles.iter().find(|t| t.tile_id == tile_id)
    }

    pub fn split(&self, split: Split) -> Vec<&RasterTile> {
        self.manifest
            .tiles
            .iter()
            .zip(&self.tiles)
            .filter(|(e, _)| e.split == split)
            .map(|(_, t)| t)
            .collect()
    }

    pub fn select(&self, ids: &[u64]) -> Result<Vec<&RasterTile>> {
        ids.iter()
            .map(|&id| self.tile(id).ok_or_else(|| Error::invalid(format!("unknown tile id {id}"))))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Seed for one tile: SHA-256 over the global seed, the length-prefixed region name and the tile id.
pub fn tile_seed(global_seed: u64, region: &str, tile_id: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update((region.len() as u64).to_le_bytes());
    h.update(region.as_bytes());
    h.update(tile_id.to_le_bytes());
    h.finalize().into()
}

fn region_constant(name: &str) -> f32 {
    let d = Sha256::digest(name.as_bytes());
    u16::from_le_bytes([d[0], d[1]]) as f32 / 65535.0
}

/// Draws `count` rectangles that lie fully inside an `height × width` tile.
pub fn draw_rectangles(rng: &mut impl Rng, size_range: [usize; 2], count: usize, height: usize, width: usize) -> Vec<Rect> {
    (0..count)
        .map(|_| {
            let rh = rng.random_range(size_range[0]..=size_range[1]);
            let rw = rng.random_range(size_range[0]..=size_range[1]);
            Rect {
                top: rng.random_range(0..=height - rh),
                left: rng.random_range(0..=width - rw),
                height: rh,
                width: rw,
            }
        })
        .collect()
}

pub fn building_mask(rects: &[Rect], height: usize, width: usize) -> Vec<f32> {
    let mut mask = vec![0.0f32; height * width];
    for r in rects {
        for y in r.top..r.top + r.height {
            mask[y * width + r.left..y * width + r.left + r.width].fill(1.0);
        }
    }
    mask
}

/// Mean of `values` over the in-bounds part of a `window × window` neighborhood.
pub fn box_mean(values: &[f32], height: usize, width: usize, window: usize) -> Vec<f32> {
    let r = (window / 2) as isize;
    let mut out = vec![0.0f32; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let (mut sum, mut count) = (0.0f64, 0u32);
            for yy in (y - r).max(0)..=(y + r).min(height as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(width as isize - 1) {
                    sum += values[yy as usize * width + xx as usize] as f64;
                    count += 1;
                }
            }
            out[y as usize * width + x as usize] = (sum / count as f64) as f32;
        }
    }
    out
}

/// Building density of a mask, clamped to [0, 1].
pub fn density_map(mask: &[f32], height: usize, width: usize) -> Vec<f32> {
    box_mean(mask, height, width, DENSITY_WINDOW)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

fn rectangle_count(rng: &mut impl Rng, region: &RegionSpec) -> usize {
    let drawn = if region.building_rate > 0.0 {
        // Poisson::new only fails for non-positive or non-finite rates, excluded by validate()
        Poisson::new(region.building_rate).map(|p| p.sample(rng) as i64).unwrap_or(0)
    } else {
        0
    };
    (drawn + region.density_bias as i64).max(0) as usize
}

pub fn generate_tile(region: &RegionSpec, tile_id: u64, global_seed: u64, channels: usize, height: usize, width: usize) -> Result<RasterTile> {
    region.validate(height, width)?;
    if channels < 1 {
        return Err(Error::config("channels must be >= 1"));
    }
    let mut rng = ChaCha8Rng::from_seed(tile_seed(global_seed, &region.name, tile_id));
    let count = rectangle_count(&mut rng, region);
    let rects = draw_rectangles(&mut rng, region.size_range, count, height, width);
    let mask = building_mask(&rects, height, width);
    let y_star = density_map(&mask, height, width);

    let sigma = region.noise_sigma as f32;
    let normal = Normal::new(0.0f32, 1.0).map_err(|_| Error::invalid("normal distribution"))?;
    let plane = height * width;
    let mut input = vec![0.0f32; channels * plane];

    let phase = [rng.random_range(0.0..core::f32::consts::TAU), rng.random_range(0.0..core::f32::consts::TAU)];
    let freq = [rng.random_range(1.0f32..3.0), rng.random_range(1.0f32..3.0)];
    let blurred = box_mean(&y_star, height, width, 3);
    let nuisance = region_constant(&region.name);
    for ch in 0..channels {
        let band = &mut input[ch * plane..][..plane];
        for (i, v) in band.iter_mut().enumerate() {
            let (y, x) = ((i / width) as f32, (i % width) as f32);
            let z: f32 = normal.sample(&mut rng);
            *v = match ch {
                0 => 0.8 * mask[i] + sigma * z,
                1 => {
                    let tex = 0.5
                        + 0.25
                            * (libm::sinf(core::f32::consts::TAU * freq[0] * x / width as f32 + phase[0])
                                + libm::sinf(core::f32::consts::TAU * freq[1] * y / height as f32 + phase[1]));
                    0.6 * (1.0 - mask[i]) * tex + sigma * z
                }
                2 => nuisance + sigma * z,
                3 => blurred[i] + sigma * (0.5 + y_star[i]) * z,
                _ => sigma * z,
            };
        }
    }
    Ok(RasterTile {
        tile_id,
        region: region.name.clone(),
        channels,
        height,
        width,
        input,
        y_star,
    })
}

/// Per-channel mean and population standard deviation over `tiles`.
/// Channels with (near) zero spread get a unit std.
pub fn channel_stats<'a>(tiles: impl IntoIterator<Item = &'a RasterTile>, channels: usize) -> ChannelStats {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for t in tiles {
        let plane = t.height * t.width;
        for ch in 0..channels {
            for &v in &t.input[ch * plane..][..plane] {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        count += plane;
    }
    let n = count.max(1) as f64;
    let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stds = sq
        .iter()
        .zip(&means)
        .map(|(s, m)| {
            let var = (s / n - m * m).max(0.0);
            let sd = libm::sqrt(var);
            if sd < 1e-6 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    ChannelStats { means, stds }
}

pub fn tile_file_name(tile_id: u64) -> String {
    format!("tile_{tile_id:06}.bin")
}

/// Generates every tile, assigns splits per region and computes train statistics.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n_train, n_val, _) = spec.split.counts(spec.tiles_per_region);
    let mut entries = Vec::new();
    let mut tiles = Vec::new();
    for (ri, region) in spec.regions.iter().enumerate() {
        for i in 0..spec.tiles_per_region {
            let tile_id = spec.tile_id(ri, i);
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            tiles.push(generate_tile(region, tile_id, spec.seed, spec.channels, spec.height, spec.width)?);
            entries.push(TileEntry {
                tile_id,
                region: region.name.clone(),
                split,
                file: tile_file_name(tile_id),
            });
        }
    }
    let stats = channel_stats(
        entries.iter().zip(&tiles).filter(|(e, _)| e.split == Split::Train).map(|(_, t)| t),
        spec.channels,
    );
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: MANIFEST_VERSION,
            dataset: spec.clone(),
            stats,
            tiles: entries,
        },
        tiles,
    })
}

/// Stratified draw of `n` train-split tile ids per region, sorted within each region.
pub fn sample_nshot(manifest: &DatasetManifest, n: usize, seed: u64) -> Result<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * manifest.dataset.regions.len());
    for region in &manifest.dataset.regions {
        let pool: Vec<u64> = manifest
            .entries(Split::Train)
            .filter(|e| e.region == region.name)
            .map(|e| e.tile_id)
            .collect();
        if n > pool.len() {
            return Err(Error::config(format!(
                "n = {n} exceeds the {} train tiles of region {:?}",
                pool.len(),
                region.name
            )));
        }
        let mut picked: Vec<u64> = rand::seq::index::sample(&mut rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

/// Stacks tiles into a normalized `B×C×H×W` input and a `B×1×H×W` target.
pub fn make_batch(tiles: &[&RasterTile], stats: &ChannelStats) -> Result<(Tensor, Tensor)> {
    let first = tiles.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    if stats.means.len() != c || stats.stds.len() != c {
        return Err(Error::invalid(format!("channel stats cover {} channels, tiles have {c}", stats.means.len())));
    }
    let plane = h * w;
    let mut input = Vec::with_capacity(tiles.len() * c * plane);
    let mut target = Vec::with_capacity(tiles.len() * plane);
    for t in tiles {
        if (t.channels, t.height, t.width) != (c, h, w) {
            return Err(Error::ShapeMismatch {
                op: "make_batch",
                lhs: vec![c, h, w],
                rhs: vec![t.channels, t.height, t.width],
            });
        }
        for ch in 0..c {
            let (m, s) = (stats.means[ch], stats.stds[ch]);
            input.extend(t.input[ch * plane..][..plane].iter().map(|&v| ((v as f64 - m) / s) as f32));
        }
        target.extend_from_slice(&t.y_star);
    }
    Ok((
        Tensor::new(&[tiles.len(), c, h, w], input)?,
        Tensor::new(&[tiles.len(), 1, h, w], target)?,
    ))
}
