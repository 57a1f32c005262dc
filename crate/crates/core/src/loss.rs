//! Training objectives, built on the tape so they can be differentiated.
//!
//! * regression: `mean((y - y*)^2)`
//! * confidence: `mean(|y - y*| * (c - c*)^2)`
//! * combined: `L0 + lambda * L1`, with `c*` from the sorted-error labeler
//! * gaussian NLL: `mean(0.5 * (ln 2pi + log_var + (y* - mu)^2 * exp(-log_var)))`

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{LOG_VAR_MAX, LOG_VAR_MIN};
use crate::targets::{assign_confidence_targets, assign_image_targets, TargetGranularity};
use crate::tensor::Tensor;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Second term of the combined objective for dual-head models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceObjective {
    /// `|y - y*| * (c - c*)^2`
    Care,
    /// `(c - c*)^2`, no error weighting.
    ErrorSorting,
    /// `(1 - c - |y - y*|)^2`, the uncertainty regresses the detached absolute error.
    AbsoluteError,
}

fn same_shape(op: &'static str, tape: &Tape, vars: &[Var]) -> Result<()> {
    let first = tape.value(vars[0]).shape();
    for &v in &vars[1..] {
        if tape.value(v).shape() != first {
            return Err(Error::ShapeMismatch {
                op,
                lhs: first.to_vec(),
                rhs: tape.value(v).shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub fn loss_regression(tape: &mut Tape, y: Var, y_star: Var) -> Result<Var> {
    same_shape("loss_regression", tape, &[y, y_star])?;
    let d = tape.sub(y, y_star)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

pub fn loss_confidence(tape: &mut Tape, y: Var, y_star: Var, c: Var, c_star: Var) -> Result<Var> {
    same_shape("loss_confidence", tape, &[y, y_star, c, c_star])?;
    if tape.value(c_star).data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("c_star must be binary"));
    }
    let d = tape.sub(y, y_star)?;
    let err = tape.abs(d)?;
    let dc = tape.sub(c, c_star)?;
    let dc2 = tape.square(dc)?;
    let w = tape.mul(err, dc2)?;
    tape.mean(w)
}

pub fn loss_gaussian_nll(tape: &mut Tape, mu: Var, log_var: Var, y_star: Var) -> Result<Var> {
    same_shape("loss_gaussian_nll", tape, &[mu, log_var, y_star])?;
    if tape
        .value(log_var)
        .data()
        .iter()
        .any(|&v| !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v))
    {
        return Err(Error::invalid("log_var outside the clamp range"));
    }
    let r = tape.sub(y_star, mu)?;
    let r2 = tape.square(r)?;
    let neg = tape.scalar_mul(log_var, -1.0)?;
    let inv_var = tape.exp(neg)?;
    let scaled = tape.mul(r2, inv_var)?;
    let s = tape.add(scaled, log_var)?;
    let s = tape.scalar_add(s, (2.0 * HALF_LN_2PI) as f32)?;
    let s = tape.scalar_mul(s, 0.5)?;
    tape.mean(s)
}

/// Handles of the pieces of a combined loss.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub l0: Var,
    pub l1: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombineSettings {
    pub objective: ConfidenceObjective,
    pub eta: f64,
    pub lambda: f32,
    pub granularity: TargetGranularity,
}

/// Labels the batch from the current (detached) errors and assembles `L0 + lambda * L1`.
///
/// `y`, `c` and `y_star` share a `B×1×H×W` (or any equal) shape. With
/// `lambda == 0` the total is the regression term itself.
pub fn combine_losses(tape: &mut Tape, y: Var, c: Var, y_star: Var, settings: &CombineSettings) -> Result<LossParts> {
    same_shape("loss_combined", tape, &[y, c, y_star])?;
    if !(settings.lambda >= 0.0) || !settings.lambda.is_finite() {
        return Err(Error::config("lambda must be finite and >= 0"));
    }
    let shape = tape.value(y).shape().to_vec();
    let errors: alloc::vec::Vec<f32> = tape
        .value(y)
        .data()
        .iter()
        .zip(tape.value(y_star).data())
        .map(|(a, b)| libm::fabsf(a - b))
        .collect();

    let l0 = loss_regression(tape, y, y_star)?;
    let l1 = match settings.objective {
        ConfidenceObjective::Care | ConfidenceObjective::ErrorSorting => {
            let targets = match settings.granularity {
                TargetGranularity::Pixel => assign_confidence_targets(&errors, settings.eta)?,
                TargetGranularity::Image => {
                    let per_image = if shape.len() >= 2 { shape[1..].iter().product() } else { errors.len() };
                    assign_image_targets(&errors, per_image, settings.eta)?
                }
            };
            let c_star = tape.constant(Tensor::new(&shape, targets.c_star)?);
            if settings.objective == ConfidenceObjective::Care {
                loss_confidence(tape, y, y_star, c, c_star)?
            } else {
                let d = tape.sub(c, c_star)?;
                let d2 = tape.square(d)?;
                tape.mean(d2)?
            }
        }
        ConfidenceObjective::AbsoluteError => {
            let target = tape.constant(Tensor::new(&shape, errors)?);
            let neg_c = tape.scalar_mul(c, -1.0)?;
            let u = tape.scalar_add(neg_c, 1.0)?;
            let d = tape.sub(u, target)?;
            let d2 = tape.square(d)?;
            tape.mean(d2)?
        }
    };
    let total = if settings.lambda == 0.0 {
        l0
    } else {
        let weighted = tape.scalar_mul(l1, settings.lambda)?;
        tape.add(l0, weighted)?
    };
    Ok(LossParts { total, l0, l1 })
}
