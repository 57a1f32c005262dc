//! The `care` subcommands. Flags override config-file values.

use std::fs;
use std::path::{Path, PathBuf};

use care_core::eval::{compare_models, evaluate_checkpoint};
use care_core::synth::{build_dataset, sample_nshot, Split};
use care_core::targets::TargetGranularity;
use care_core::train::{train, Baseline};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::maps::export_maps;
use crate::report::{comparison_csv, comparison_markdown, log_csv, read_reports, reports_csv, write_reports};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "log.csv";

#[derive(Debug, Parser)]
#[command(name = "care", version, about = "Confidence-aware pixel-wise density regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tile dataset.
    GenData(GenDataArgs),
    /// Train a model on an n-shot subset of the train split.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint and write a report CSV.
    Eval(EvalArgs),
    /// Percentage improvement of the first report over the others.
    Compare(CompareArgs),
    /// Export prediction, ground truth, confidence and error panels for one tile.
    Maps(MapsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; falls back to the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tiles_per_region: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GranularityArg {
    Pixel,
    Image,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Tiles per region; omit to train on the whole train split.
    #[arg(long)]
    pub n: Option<usize>,
    /// care, gaussian_nll, error_sorting, absolute_error or ensemble:M
    #[arg(long, value_parser = parse_baseline)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; falls back to the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub phase0_epochs: Option<usize>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    #[arg(long)]
    pub clip_norm: Option<f32>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated abstention thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.1])]
    pub zeta: Vec<f64>,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated report CSVs; the first row of the first file is the reference.
    #[arg(long, value_delimiter = ',', required = true)]
    pub reports: Vec<PathBuf>,
    /// Directory for comparison.csv and comparison.md; defaults to the first report's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MapsArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub tile: i64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    s.parse::<Baseline>().map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Compare(a) => compare_cmd(&a),
        Command::Maps(a) => maps_cmd(&a),
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// The output directory is where `config.resolved.json` lands, so the echoed
/// config leaves it out and reruns into another directory stay byte-identical.
fn take_output(cfg: &mut RunConfig, flag: Option<&PathBuf>) -> Result<PathBuf> {
    let out = flag.cloned().or(cfg.output.take());
    cfg.output = None;
    out.ok_or_else(|| Error::config("--out is required"))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    if let Some(n) = a.tiles_per_region {
        cfg.dataset.tiles_per_region = n;
    }
    let out = take_output(&mut cfg, a.out.as_ref())?;
    cfg.dataset.validate()?;
    let ds = build_dataset(&cfg.dataset)?;
    write_dataset(&ds, &out)?;
    cfg.write_resolved(&out)?;
    println!("wrote {} tiles to {}", ds.tiles.len(), out.display());
    for (ch, (m, s)) in ds.manifest.stats.means.iter().zip(&ds.manifest.stats.stds).enumerate() {
        println!("channel {ch}: mean {m:.6} std {s:.6}");
    }
    Ok(())
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    let data = cfg.data.clone().ok_or_else(|| Error::config("--data is required"))?;
    let t = &mut cfg.train;
    if let Some(b) = a.baseline {
        t.baseline = b;
    }
    if let Some(s) = a.seed {
        t.seed = s;
        cfg.model.seed = s;
    }
    macro_rules! set {
        ($($flag:ident => $field:expr),*) => {$( if let Some(v) = a.$flag { $field = v; } )*};
    }
    set!(eta => t.eta, lambda => t.lambda, lr => t.lr, momentum => t.momentum, batch_size => t.batch_size,
         phase0_epochs => t.phase0_epochs, phase1_epochs => t.phase1_epochs,
         base_width => cfg.model.base_width, depth => cfg.model.depth);
    if let Some(g) = a.granularity {
        t.granularity = match g {
            GranularityArg::Pixel => TargetGranularity::Pixel,
            GranularityArg::Image => TargetGranularity::Image,
        };
    }
    if a.clip_norm.is_some() {
        t.clip_norm = a.clip_norm;
    }
    if a.n.is_some() {
        cfg.n_shot = a.n;
    }
    let out = take_output(&mut cfg, a.out.as_ref())?;
    cfg.train.validate()?;

    let ds = read_dataset(&data)?;
    cfg.dataset = ds.manifest.dataset.clone();
    cfg.model.in_channels = ds.manifest.dataset.channels;
    cfg.model.head = cfg.train.baseline.head();
    cfg.validate()?;
    cfg.model.check_spatial(ds.manifest.dataset.height, ds.manifest.dataset.width)?;

    let tiles = match cfg.n_shot {
        Some(n) => ds.select(&sample_nshot(&ds.manifest, n, cfg.train.seed)?)?,
        None => ds.split(Split::Train),
    };
    let mut ck = train(&tiles, &ds.manifest.stats, &cfg.model, &cfg.train)?;
    ck.n_shot = cfg.n_shot;

    fs::create_dir_all(&out).map_err(Error::io(&out))?;
    save_checkpoint(&ck, &out.join(CHECKPOINT_FILE))?;
    let log_path = out.join(LOG_FILE);
    fs::write(&log_path, log_csv(&ck.log)).map_err(Error::io(&log_path))?;
    cfg.write_resolved(&out)?;
    println!(
        "trained {} on {} tiles ({} member{})",
        ck.model_id(),
        tiles.len(),
        ck.members.len(),
        if ck.members.len() == 1 { "" } else { "s" }
    );
    if let Some(last) = ck.log.last() {
        println!(
            "epoch {} phase {}: L0 {:.6} L1 {:.6} total {:.6}",
            last.epoch, last.phase, last.l0, last.l1, last.total
        );
    }
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let ds = read_dataset(&a.data)?;
    let spec = &ds.manifest.dataset;
    if spec.channels != ck.model.in_channels || ck.model.check_spatial(spec.height, spec.width).is_err() {
        return Err(Error::Format {
            path: a.data.clone(),
            offset: 0,
            msg: format!(
                "dataset tiles are {}×{}×{}, incompatible with a model taking {} channels at depth {}",
                spec.channels, spec.height, spec.width, ck.model.in_channels, ck.model.depth
            ),
        });
    }
    let config = care_core::eval::EvalConfig {
        zeta_list: a.zeta.clone(),
        split: match a.split {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        },
        ..Default::default()
    };
    config.validate()?;
    let report = evaluate_checkpoint(&ck, &ds, &config)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    write_reports(std::slice::from_ref(&report), &a.report)?;
    print!("{}", reports_csv(std::slice::from_ref(&report))?);
    Ok(())
}

pub fn compare_cmd(a: &CompareArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.reports {
        rows.extend(read_reports(p)?);
    }
    let cmp = compare_models(&rows)?;
    let out = match &a.out {
        Some(d) => d.clone(),
        None => a.reports[0].parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !out.as_os_str().is_empty() {
        fs::create_dir_all(&out).map_err(Error::io(&out))?;
    }
    let md = comparison_markdown(&cmp);
    for (name, text) in [("comparison.csv", comparison_csv(&cmp)), ("comparison.md", md.clone())] {
        let path = out.join(name);
        fs::write(&path, text).map_err(Error::io(&path))?;
    }
    print!("{md}");
    Ok(())
}

pub fn maps_cmd(a: &MapsArgs) -> Result<()> {
    let tile = u64::try_from(a.tile).map_err(|_| Error::config(format!("--tile must be a tile id >= 0, got {}", a.tile)))?;
    let ds = read_dataset(&a.data)?;
    if ds.tile(tile).is_none() {
        return Err(Error::config(format!("tile {tile} is not in the dataset")));
    }
    let ck = load_checkpoint(&a.ckpt)?;
    let sidecar = export_maps(&ck, &ds, tile, &a.out)?;
    for (name, p) in &sidecar.panels {
        println!("{name}: {} (min {:.6}, max {:.6})", p.file, p.min, p.max);
    }
    Ok(())
}
