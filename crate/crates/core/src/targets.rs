//! Sorted-error confidence labels.
//!
//! Errors are ranked ascending with ties broken by original position; the
//! lowest-error `floor(eta * len)` entries are labelled 1 (trusted) and the
//! rest 0.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What gets ranked inside a mini-batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetGranularity {
    /// Every pixel of every tile is ranked on its own.
    #[default]
    Pixel,
    /// Tiles are ranked by mean absolute error; each pixel inherits its tile's label.
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceTargets {
    /// 0 or 1, aligned with the input errors.
    pub c_star: Vec<f32>,
}

impl ConfidenceTargets {
    pub fn ones(&self) -> usize {
        self.c_star.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Number of entries labelled trusted out of `len`.
pub fn kept_count(eta: f64, len: usize) -> usize {
    libm::floor(eta * len as f64) as usize
}

pub fn assign_confidence_targets(errors: &[f32], eta: f64) -> Result<ConfidenceTargets> {
    if errors.len() < 2 {
        return Err(Error::invalid("confidence targets need at least two errors"));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::config(alloc::format!("eta must lie in (0, 1), got {eta}")));
    }
    if let Some(e) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::invalid(alloc::format!("errors must be finite and >= 0, got {e}")));
    }
    let mut order: Vec<usize> = (0..errors.len()).collect();
    // stable sort keeps index order among equal errors
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]));
    let mut c_star = vec![0.0f32; errors.len()];
    for &i in &order[..kept_count(eta, errors.len())] {
        c_star[i] = 1.0;
    }
    Ok(ConfidenceTargets { c_star })
}

/// Tile-level ranking: `errors` holds `pixels_per_image` consecutive entries per tile.
pub fn assign_image_targets(errors: &[f32], pixels_per_image: usize, eta: f64) -> Result<ConfidenceTargets> {
    if pixels_per_image == 0 || errors.len() % pixels_per_image != 0 {
        return Err(Error::invalid("error count is not a multiple of the image size"));
    }
    let per_image: Vec<f32> = errors
        .chunks(pixels_per_image)
        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / pixels_per_image as f64) as f32)
        .collect();
    let labels = assign_confidence_targets(&per_image, eta)?;
    let c_star = labels
        .c_star
        .iter()
        .flat_map(|&l| core::iter::repeat_n(l, pixels_per_image))
        .collect();
    Ok(ConfidenceTargets { c_star })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_sorted_example() {
        let t = assign_confidence_targets(&[0.1, 0.5, 0.2, 0.3, 0.4], 0.8).unwrap();
        assert_eq!(t.c_star, [1.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn ties_break_by_index() {
        let t = assign_confidence_targets(&[0.3; 4], 0.5).unwrap();
        assert_eq!(t.c_star, [1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn already_sorted_keeps_prefix() {
        let errs: Vec<f32> = (0..10).map(|i| i as f32 * 0.1).collect();
        let t = assign_confidence_targets(&errs, 0.8).unwrap();
        assert_eq!(t.c_star, [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(assign_confidence_targets(&[], 0.8).is_err());
        assert!(assign_confidence_targets(&[0.1], 0.8).is_err());
        assert!(assign_confidence_targets(&[0.1, -0.2], 0.8).is_err());
        assert!(assign_confidence_targets(&[0.1, f32::NAN], 0.8).is_err());
        assert!(assign_confidence_targets(&[0.1, 0.2], 1.0).is_err());
    }

    #[test]
    fn image_level_labels_whole_tiles() {
        let errs = [0.5, 0.5, 0.1, 0.1, 0.2, 0.3];
        let t = assign_image_targets(&errs, 2, 0.5).unwrap();
        assert_eq!(t.c_star, [0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
