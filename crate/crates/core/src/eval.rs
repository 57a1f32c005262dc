//! Confidence-quality metrics, abstention, n-shot sweeps and model comparison.
//!
//! All statistics pool every pixel of every evaluated tile, in tile order,
//! and accumulate in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ensemble_predict;
use crate::synth::{make_batch, sample_nshot, ChannelStats, Dataset, RasterTile, Split};
use crate::train::{train, Checkpoint, TrainConfig};
use crate::model::{HeadKind, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub zeta_list: Vec<f64>,
    /// Lower bound on the predicted density inside the abstention rule.
    pub density_floor: f64,
    pub split: Split,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            zeta_list: alloc::vec![0.2, 0.1],
            density_floor: 1e-3,
            split: Split::Val,
            batch_size: 16,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(z) = self.zeta_list.iter().find(|z| !(**z > 0.0 && **z < 1.0)) {
            return Err(Error::config(format!("eval.zeta_list entries must lie in (0, 1), got {z}")));
        }
        if !(self.density_floor > 0.0) || !self.density_floor.is_finite() {
            return Err(Error::config("eval.density_floor must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Column suffix for a threshold, e.g. `0.2 -> "20"`.
pub fn zeta_label(zeta: f64) -> String {
    let pct = zeta * 100.0;
    if (pct - libm::round(pct)).abs() < 1e-9 {
        format!("{}", libm::round(pct) as i64)
    } else {
        let s = format!("{pct}");
        s.replace('.', "p")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaMetrics {
    pub zeta: f64,
    /// `None` when every pixel abstained.
    pub mse: Option<f64>,
    pub retained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub n: Option<usize>,
    pub split: Option<Split>,
    pub seed: Option<u64>,
    pub mean_discrepancy: f64,
    pub median_discrepancy: f64,
    pub mse: f64,
    pub at_zeta: Vec<ZetaMetrics>,
    /// `None` when either input is constant.
    pub pearson_r: Option<f64>,
    pub tiles: usize,
}

impl EvalReport {
    pub fn zeta(&self, zeta: f64) -> Option<&ZetaMetrics> {
        self.at_zeta.iter().find(|z| (z.zeta - zeta).abs() < 1e-12)
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: alloc::vec![a],
            rhs: alloc::vec![b],
        });
    }
    Ok(())
}

/// Per-pixel `| |y - y*| - (1 - c) |`.
pub fn discrepancies(y: &[f32], y_star: &[f32], c: &[f32]) -> Result<Vec<f64>> {
    check_len("discrepancy", y.len(), y_star.len())?;
    check_len("discrepancy", y.len(), c.len())?;
    Ok(y.iter()
        .zip(y_star)
        .zip(c)
        .map(|((&y, &t), &c)| ((y as f64 - t as f64).abs() - (1.0 - c as f64)).abs())
        .collect())
}

/// Lower median (index `(n - 1) / 2` of the sorted values).
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Some(*m)
}

/// `(mean, median)` discrepancy over all pixels.
pub fn discrepancy_stats(y: &[f32], y_star: &[f32], c: &[f32]) -> Result<(f64, f64)> {
    let d = discrepancies(y, y_star, c)?;
    if d.is_empty() {
        return Err(Error::invalid("discrepancy over zero pixels"));
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok((mean, lower_median(&d).unwrap_or(0.0)))
}

/// `true` keeps a pixel: `1 - c <= zeta * max(y, density_floor)`.
pub fn abstention_mask(y: &[f32], c: &[f32], zeta: f64, density_floor: f64) -> Vec<bool> {
    y.iter()
        .zip(c)
        .map(|(&y, &c)| 1.0 - c as f64 <= zeta * (y as f64).max(density_floor))
        .collect()
}

/// MSE over retained pixels and the retained fraction.
pub fn mse_retained(y: &[f32], y_star: &[f32], mask: &[bool]) -> Result<(Option<f64>, f64)> {
    check_len("mse_retained", y.len(), y_star.len())?;
    check_len("mse_retained", y.len(), mask.len())?;
    let (mut sum, mut kept) = (0.0f64, 0usize);
    for ((&a, &b), &m) in y.iter().zip(y_star).zip(mask) {
        if m {
            let d = a as f64 - b as f64;
            sum += d * d;
            kept += 1;
        }
    }
    let fraction = if y.is_empty() { 0.0 } else { kept as f64 / y.len() as f64 };
    Ok(((kept > 0).then(|| sum / kept as f64), fraction))
}

pub fn mse(y: &[f32], y_star: &[f32]) -> Result<f64> {
    let all = alloc::vec![true; y.len()];
    let (m, _) = mse_retained(y, y_star, &all)?;
    m.ok_or_else(|| Error::invalid("mse over zero pixels"))
}

/// Pearson correlation; `None` for fewer than two points or a constant input.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Correlation between uncertainty `1 - c` and absolute error.
pub fn confidence_error_correlation(y: &[f32], y_star: &[f32], c: &[f32]) -> Result<Option<f64>> {
    check_len("correlation", y.len(), y_star.len())?;
    check_len("correlation", y.len(), c.len())?;
    let u: Vec<f64> = c.iter().map(|&c| 1.0 - c as f64).collect();
    let e: Vec<f64> = y.iter().zip(y_star).map(|(&a, &b)| (a as f64 - b as f64).abs()).collect();
    Ok(pearson(&u, &e))
}

/// Flattened maps for a set of tiles, in tile order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub y: Vec<f32>,
    pub c: Vec<f32>,
    pub y_star: Vec<f32>,
    pub tiles: usize,
}

/// Confidence implied by a predicted standard deviation: `1 - clamp(sigma, 0, 1)`.
pub fn sigma_to_confidence(sigma: f32) -> f32 {
    1.0 - sigma.clamp(0.0, 1.0)
}

/// Runs the checkpoint on `tiles` (any head type) in batches of `batch_size`.
pub fn predict(ck: &Checkpoint, tiles: &[&RasterTile], stats: &ChannelStats, batch_size: usize) -> Result<Predictions> {
    let mut out = Predictions {
        y: Vec::new(),
        c: Vec::new(),
        y_star: Vec::new(),
        tiles: tiles.len(),
    };
    let first = ck.members.first().ok_or_else(|| Error::invalid("checkpoint has no models"))?;
    for chunk in tiles.chunks(batch_size.max(1)) {
        let (x, t) = make_batch(chunk, stats)?;
        out.y_star.extend_from_slice(t.data());
        match first.config().head {
            HeadKind::DualConfidence => {
                let p = first.predict_dual(&x)?;
                out.y.extend_from_slice(p.y.data());
                out.c.extend_from_slice(p.c.data());
            }
            HeadKind::Gaussian => {
                let p = ensemble_predict(&ck.members, &x)?;
                out.y.extend_from_slice(p.mu.data());
                out.c.extend(p.var.data().iter().map(|&v| sigma_to_confidence(libm::sqrtf(v))));
            }
        }
    }
    Ok(out)
}

/// Every metric of a report, from flattened maps.
pub fn evaluate_maps(model: &str, y: &[f32], y_star: &[f32], c: &[f32], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let (mean_discrepancy, median_discrepancy) = discrepancy_stats(y, y_star, c)?;
    let mut at_zeta = Vec::with_capacity(config.zeta_list.len());
    for &zeta in &config.zeta_list {
        let mask = abstention_mask(y, c, zeta, config.density_floor);
        let (mse, retained) = mse_retained(y, y_star, &mask)?;
        at_zeta.push(ZetaMetrics { zeta, mse, retained });
    }
    Ok(EvalReport {
        model: model.into(),
        n: None,
        split: None,
        seed: None,
        mean_discrepancy,
        median_discrepancy,
        mse: mse(y, y_star)?,
        at_zeta,
        pearson_r: confidence_error_correlation(y, y_star, c)?,
        tiles: 0,
    })
}

pub fn evaluate_checkpoint(ck: &Checkpoint, dataset: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let tiles = dataset.split(config.split);
    if tiles.is_empty() {
        return Err(Error::invalid(format!("split {} has no tiles", config.split.as_str())));
    }
    let p = predict(ck, &tiles, &dataset.manifest.stats, config.batch_size)?;
    let mut report = evaluate_maps(&ck.model_id(), &p.y, &p.y_star, &p.c, config)?;
    report.n = ck.n_shot;
    report.split = Some(config.split);
    report.seed = Some(ck.train.seed);
    report.tiles = p.tiles;
    Ok(report)
}

/// Trains on a stratified `n`-per-region subset for each `n` and evaluates on the held-out split.
pub fn run_nshot(
    dataset: &Dataset,
    n_list: &[usize],
    model: &ModelConfig,
    train_config: &TrainConfig,
    eval_config: &EvalConfig,
    sample_seed: u64,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let ids = sample_nshot(&dataset.manifest, n, sample_seed)?;
        let tiles = dataset.select(&ids)?;
        let model = ModelConfig {
            head: train_config.baseline.head(),
            ..model.clone()
        };
        let mut ck = train(&tiles, &dataset.manifest.stats, &model, train_config)?;
        ck.n_shot = Some(n);
        reports.push(evaluate_checkpoint(&ck, dataset, eval_config)?);
    }
    Ok(reports)
}

/// Percentage improvement of `a` over `b`; positive means `a` is better.
pub fn improvement(a: f64, b: f64, lower_is_better: bool) -> Option<f64> {
    if b == 0.0 || !a.is_finite() || !b.is_finite() {
        return if a == b { Some(0.0) } else { None };
    }
    Some(if lower_is_better { (b - a) / b * 100.0 } else { (a - b) / b * 100.0 })
}

/// Comparable metrics of a report as `(name, value, lower_is_better)`.
pub fn metric_columns(r: &EvalReport) -> Vec<(String, Option<f64>, bool)> {
    let mut v = alloc::vec![
        ("err_mean".into(), Some(r.mean_discrepancy), true),
        ("err_median".into(), Some(r.median_discrepancy), true),
        ("mse".into(), Some(r.mse), true),
    ];
    for z in &r.at_zeta {
        v.push((format!("mse_{}", zeta_label(z.zeta)), z.mse, true));
    }
    v.push(("pearson_r".into(), r.pearson_r, false));
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub n: Option<usize>,
    /// `(metric, improvement of the reference over this model, in percent)`.
    pub improvements: Vec<(String, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
}

/// Improvement of the first report over each report (itself included).
pub fn compare_models(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::invalid("comparison needs at least two reports"));
    }
    let reference = &reports[0];
    let ref_cols = metric_columns(reference);
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        let clash = |a: Option<Split>, b: Option<Split>| matches!((a, b), (Some(x), Some(y)) if x != y);
        if clash(reference.split, r.split) || matches!((reference.seed, r.seed), (Some(x), Some(y)) if x != y) {
            return Err(Error::invalid(format!(
                "report {} was produced on a different split or seed than {}",
                r.model, reference.model
            )));
        }
        let cols = metric_columns(r);
        if cols.iter().map(|c| &c.0).ne(ref_cols.iter().map(|c| &c.0)) {
            return Err(Error::invalid(format!("report {} has different metric columns", r.model)));
        }
        let improvements = ref_cols
            .iter()
            .zip(&cols)
            .map(|((name, a, lower), (_, b, _))| {
                let v = match (a, b) {
                    (Some(a), Some(b)) => improvement(*a, *b, *lower),
                    _ => None,
                };
                (name.clone(), v)
            })
            .collect();
        rows.push(ComparisonRow {
            model: r.model.clone(),
            n: r.n,
            improvements,
        });
    }
    Ok(Comparison {
        reference: reference.model.clone(),
        rows,
    })
}

/// The five per-pixel panels exported as images, each `H×W` in `[0, 1]` after clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPanels {
    pub prediction: Vec<f32>,
    pub ground_truth: Vec<f32>,
    pub confidence: Vec<f32>,
    pub abs_error: Vec<f32>,
    pub discrepancy: Vec<f32>,
}

impl MapPanels {
    pub fn new(y: &[f32], y_star: &[f32], c: &[f32]) -> Result<Self> {
        check_len("map_panels", y.len(), y_star.len())?;
        check_len("map_panels", y.len(), c.len())?;
        let abs_error: Vec<f32> = y.iter().zip(y_star).map(|(a, b)| (a - b).abs()).collect();
        let discrepancy = abs_error.iter().zip(c).map(|(e, c)| (e - (1.0 - c)).abs()).collect();
        Ok(Self {
            prediction: y.to_vec(),
            ground_truth: y_star.to_vec(),
            confidence: c.to_vec(),
            abs_error,
            discrepancy,
        })
    }

    /// `(file stem, values)` in panel order b) through f).
    pub fn panels(&self) -> [(&'static str, &[f32]); 5] {
        [
            ("prediction", &self.prediction),
            ("ground_truth", &self.ground_truth),
            ("confidence", &self.confidence),
            ("abs_error", &self.abs_error),
            ("discrepancy", &self.discrepancy),
        ]
    }
}

pub fn min_max(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_pixel_has_zero_discrepancy() {
        let (mean, median) = discrepancy_stats(&[0.6], &[0.5], &[0.9]).unwrap();
        assert!(mean < 1e-6 && median < 1e-6);
        let (mean, median) = discrepancy_stats(&[0.3, 0.7], &[0.3, 0.7], &[1.0, 1.0]).unwrap();
        assert_eq!((mean, median), (0.0, 0.0));
        assert!(discrepancy_stats(&[], &[], &[]).is_err());
    }

    #[test]
    fn median_sits_below_mean_with_outlier() {
        // |e| = 0 everywhere, uncertainties 0, 0, 1
        let (mean, median) = discrepancy_stats(&[0.5; 3], &[0.5; 3], &[1.0, 1.0, 0.0]).unwrap();
        assert!((mean - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(median, 0.0);
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
    }

    #[test]
    fn abstention_rule_examples() {
        assert_eq!(abstention_mask(&[0.2], &[0.95], 0.2, 1e-3), [false]);
        assert_eq!(abstention_mask(&[0.8], &[0.99], 0.2, 1e-3), [true]);
        assert!(abstention_mask(&[0.0, 0.5, 1.0], &[1.0; 3], 0.01, 1e-3).iter().all(|&k| k));
    }

    #[test]
    fn retained_mse_examples() {
        let y = [0.1, 0.5];
        let t = [0.0, 0.0];
        assert_eq!(mse_retained(&y, &t, &[true, true]).unwrap().0, Some(mse(&y, &t).unwrap()));
        assert_eq!(mse_retained(&y, &t, &[false, false]).unwrap(), (None, 0.0));
        let (m, f) = mse_retained(&y, &t, &[true, false]).unwrap();
        assert!((m.unwrap() - 0.01).abs() < 1e-9);
        assert_eq!(f, 0.5);
    }

    #[test]
    fn correlation_properties() {
        let y = [0.1f32, 0.4, 0.3, 0.9];
        let t = [0.0f32, 0.0, 0.0, 0.0];
        let c: Vec<f32> = y.iter().map(|v| 1.0 - v).collect();
        assert!((confidence_error_correlation(&y, &t, &c).unwrap().unwrap() - 1.0).abs() < 1e-6);
        let c2: Vec<f32> = y.iter().map(|v| 1.0 - (0.5 * v + 0.1)).collect();
        assert!((confidence_error_correlation(&y, &t, &c2).unwrap().unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(confidence_error_correlation(&y, &t, &[0.5; 4]).unwrap(), None);
        assert_eq!(pearson(&[1.0], &[2.0]), None);
    }

    #[test]
    fn improvement_formula() {
        assert!((improvement(0.00326, 0.00468, true).unwrap() - 30.34).abs() < 0.01);
        assert!((improvement(0.62090, 0.56696, false).unwrap() - 9.51).abs() < 0.01);
        assert_eq!(improvement(0.5, 0.5, true), Some(0.0));
    }

    #[test]
    fn zeta_labels() {
        assert_eq!(zeta_label(0.2), "20");
        assert_eq!(zeta_label(0.1), "10");
        assert_eq!(zeta_label(0.5), "50");
        assert_eq!(zeta_label(0.125), "12p5");
    }

    #[test]
    fn panels_of_a_perfect_tile_are_dark() {
        let y = [0.2f32, 0.8];
        let p = MapPanels::new(&y, &y, &[1.0, 1.0]).unwrap();
        assert!(p.abs_error.iter().chain(&p.discrepancy).all(|&v| v == 0.0));
        assert_eq!(min_max(&p.prediction), (0.2, 0.8));
    }
}
