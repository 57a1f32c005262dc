//! Two-phase mini-batch training for every supported objective.
//!
//! Phase 1 trains the regression term alone (`lambda = 0`), phase 2 adds
//! the confidence term with the configured `lambda`. Gaussian and ensemble
//! baselines minimize the NLL in both phases. Mini-batches come from a
//! seeded shuffle each epoch, so a run is a pure function of its inputs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss::{combine_losses, loss_gaussian_nll, loss_regression, CombineSettings, ConfidenceObjective};
use crate::model::{EnsembleConfig, HeadKind, Model, ModelConfig};
use crate::optim::Sgd;
use crate::synth::{make_batch, ChannelStats, RasterTile};
use crate::targets::TargetGranularity;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Care,
    GaussianNll,
    ErrorSorting,
    AbsoluteError,
    Ensemble(usize),
}

impl Baseline {
    pub fn head(&self) -> HeadKind {
        match self {
            Baseline::Care | Baseline::ErrorSorting | Baseline::AbsoluteError => HeadKind::DualConfidence,
            Baseline::GaussianNll | Baseline::Ensemble(_) => HeadKind::Gaussian,
        }
    }

    pub fn objective(&self) -> Option<ConfidenceObjective> {
        match self {
            Baseline::Care => Some(ConfidenceObjective::Care),
            Baseline::ErrorSorting => Some(ConfidenceObjective::ErrorSorting),
            Baseline::AbsoluteError => Some(ConfidenceObjective::AbsoluteError),
            _ => None,
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Care => f.write_str("care"),
            Baseline::GaussianNll => f.write_str("gaussian_nll"),
            Baseline::ErrorSorting => f.write_str("error_sorting"),
            Baseline::AbsoluteError => f.write_str("absolute_error"),
            Baseline::Ensemble(m) => write!(f, "ensemble:{m}"),
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "care" => Baseline::Care,
            "gaussian_nll" => Baseline::GaussianNll,
            "error_sorting" => Baseline::ErrorSorting,
            "absolute_error" => Baseline::AbsoluteError,
            _ => {
                let m = s
                    .strip_prefix("ensemble:")
                    .and_then(|m| m.parse::<usize>().ok())
                    .filter(|&m| m >= 1)
                    .ok_or_else(|| {
                        Error::config(format!(
                            "unknown baseline {s:?}; expected care, gaussian_nll, error_sorting, absolute_error or ensemble:M"
                        ))
                    })?;
                Baseline::Ensemble(m)
            }
        })
    }
}

impl Serialize for Baseline {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Baseline {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Fraction of each mini-batch labelled trusted.
    pub eta: f64,
    /// Confidence-term weight in phase 2.
    pub lambda: f32,
    pub phase0_epochs: usize,
    pub phase1_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
    pub baseline: Baseline,
    pub granularity: TargetGranularity,
    /// Optional cap on the global gradient norm per step. Off by default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.8,
            lambda: 1.0,
            phase0_epochs: 40,
            phase1_epochs: 60,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            baseline: Baseline::Care,
            granularity: TargetGranularity::Pixel,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::config(format!("train.eta must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("train.lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size must be >= 2"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("train.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config(format!("train.clip_norm must be positive, got {c}")));
            }
        }
        if let Baseline::Ensemble(0) = self.baseline {
            return Err(Error::config("ensemble needs at least one member"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phase0_epochs + self.phase1_epochs
    }
}

/// Mean losses over the mini-batches of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    /// 1 while `lambda = 0`, 2 afterwards.
    pub phase: u8,
    pub l0: f64,
    pub l1: f64,
    pub total: f64,
}

/// Trained weights plus everything needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// One entry for single models, `M` for ensembles.
    pub members: Vec<Model>,
    pub member_seeds: Vec<u64>,
    /// Tiles per region used for training, when known.
    pub n_shot: Option<usize>,
    /// For ensembles, each row averages the members.
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn is_ensemble(&self) -> bool {
        matches!(self.train.baseline, Baseline::Ensemble(_))
    }

    pub fn model_id(&self) -> String {
        self.train.baseline.to_string()
    }
}

/// Member seeds used for a baseline: the model seed, or `M` derived seeds.
pub fn member_seeds(model: &ModelConfig, baseline: Baseline) -> Vec<u64> {
    match baseline {
        Baseline::Ensemble(m) => EnsembleConfig::derive(model.seed, m).member_seeds,
        _ => alloc::vec![model.seed],
    }
}

struct Totals {
    l0: f64,
    l1: f64,
    total: f64,
    batches: usize,
}

/// Trains on `tiles` (already normalized with `stats` at batch time).
pub fn train(tiles: &[&RasterTile], stats: &ChannelStats, model: &ModelConfig, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    model.validate()?;
    if tiles.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if model.head != config.baseline.head() {
        return Err(Error::config(format!(
            "baseline {} needs a {:?} head, model has {:?}",
            config.baseline,
            config.baseline.head(),
            model.head
        )));
    }
    if tiles[0].channels != model.in_channels {
        return Err(Error::config(format!(
            "tiles have {} channels, model expects {}",
            tiles[0].channels, model.in_channels
        )));
    }
    model.check_spatial(tiles[0].height, tiles[0].width)?;

    let seeds = member_seeds(model, config.baseline);
    if let Baseline::Ensemble(m) = config.baseline {
        EnsembleConfig {
            members: m,
            member_seeds: seeds.clone(),
        }
        .validate()?;
    }
    let mut members = Vec::with_capacity(seeds.len());
    let mut logs: Vec<Vec<EpochLog>> = Vec::with_capacity(seeds.len());
    for (k, &seed) in seeds.iter().enumerate() {
        let cfg = ModelConfig { seed, ..model.clone() };
        let (m, log) = train_member(tiles, stats, &cfg, config, k as u64)?;
        members.push(m);
        logs.push(log);
    }
    let log = average_logs(&logs);
    Ok(Checkpoint {
        model: model.clone(),
        train: config.clone(),
        members,
        member_seeds: seeds,
        n_shot: None,
        log,
    })
}

fn average_logs(logs: &[Vec<EpochLog>]) -> Vec<EpochLog> {
    if logs.len() == 1 {
        return logs[0].clone();
    }
    let m = logs.len() as f64;
    (0..logs[0].len())
        .map(|e| {
            let rows = logs.iter().map(|l| &l[e]);
            EpochLog {
                epoch: logs[0][e].epoch,
                phase: logs[0][e].phase,
                l0: rows.clone().map(|r| r.l0).sum::<f64>() / m,
                l1: rows.clone().map(|r| r.l1).sum::<f64>() / m,
                total: rows.map(|r| r.total).sum::<f64>() / m,
            }
        })
        .collect()
}

fn train_member(
    tiles: &[&RasterTile],
    stats: &ChannelStats,
    cfg: &ModelConfig,
    config: &TrainConfig,
    member: u64,
) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = Model::build(cfg)?;
    let mut opt = Sgd::new(config.lr, config.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ member.wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    let mut log = Vec::with_capacity(config.total_epochs());

    for epoch in 0..config.total_epochs() {
        let phase = if epoch < config.phase0_epochs { 1 } else { 2 };
        let lambda = if phase == 1 { 0.0 } else { config.lambda };
        order.shuffle(&mut rng);
        let mut totals = Totals {
            l0: 0.0,
            l1: 0.0,
            total: 0.0,
            batches: 0,
        };
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&RasterTile> = chunk.iter().map(|&i| tiles[i]).collect();
            step(&mut model, &mut opt, &batch, stats, config, lambda, &mut totals).map_err(|e| Error::Diverged {
                epoch,
                batch: b,
                cause: e.to_string(),
            })?;
        }
        let n = totals.batches.max(1) as f64;
        log.push(EpochLog {
            epoch,
            phase,
            l0: totals.l0 / n,
            l1: totals.l1 / n,
            total: totals.total / n,
        });
    }
    Ok((model, log))
}

fn step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &[&RasterTile],
    stats: &ChannelStats,
    config: &TrainConfig,
    lambda: f32,
    totals: &mut Totals,
) -> Result<()> {
    let (x, y_star) = make_batch(batch, stats)?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = tape.constant(x);
    let y_star = tape.constant(y_star);
    let (total, l0, l1) = match config.baseline.objective() {
        Some(objective) => {
            let out = model.forward_dual(&mut tape, &params, x)?;
            let settings = CombineSettings {
                objective,
                eta: config.eta,
                lambda,
                granularity: config.granularity,
            };
            let parts = combine_losses(&mut tape, out.y, out.c, y_star, &settings)?;
            (parts.total, parts.l0, parts.l1)
        }
        None => {
            let out = model.forward_gaussian(&mut tape, &params, x)?;
            let mse = loss_regression(&mut tape, out.mu, y_star)?;
            let nll = loss_gaussian_nll(&mut tape, out.mu, out.log_var, y_star)?;
            (nll, mse, nll)
        }
    };
    let item = |v| tape.value(v).item().unwrap_or(f32::NAN) as f64;
    let (t, a, b) = (item(total), item(l0), item(l1));
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    totals.total += t;
    totals.l0 += a;
    totals.l1 += b;
    totals.batches += 1;
    let mut grads = tape.backward(total)?;
    if let Some(c) = config.clip_norm {
        grads.clip_norm(c);
    }
    opt.step(model.params_mut(), &grads)
}
