//! Encoder-decoder network with skip connections and two 1x1 output heads.
//!
//! Encoder stage `s`: 3x3 conv (padding 1) to `base_width * 2^s` channels,
//! ReLU, then 2x2 max-pool. The decoder mirrors it: nearest 2x upsample,
//! concatenation with the matching encoder activation, 3x3 conv, ReLU. Both
//! heads read the final decoder features:
//!
//! * dual-confidence: `y = sigmoid(head0)`, `c = sigmoid(head1)`
//! * gaussian: `mu = head0`, `log_var = clamp(head1, -10, 10)`

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f32 = -10.0;
pub const LOG_VAR_MAX: f32 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    DualConfidence,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_width: 8,
            depth: 2,
            head: HeadKind::DualConfidence,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("model.depth must be >= 1"));
        }
        if self.depth > 16 {
            return Err(Error::config("model.depth must be <= 16"));
        }
        if self.base_width < 2 {
            return Err(Error::config("model.base_width must be >= 2"));
        }
        if self.in_channels < 1 {
            return Err(Error::config("model.in_channels must be >= 1"));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Spatial extents must be divisible by `2^depth`.
    pub fn check_spatial(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::InvalidShape {
                op: "model",
                msg: format!("spatial extents {height}x{width} must be positive multiples of {m}"),
            });
        }
        Ok(())
    }

    /// Same architecture, ignoring the init seed.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        self.in_channels == other.in_channels && self.base_width == other.base_width && self.depth == other.depth && self.head == other.head
    }

    /// `(name, shape)` of every parameter in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), alloc::vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), alloc::vec![cout]));
        };
        let mut cin = self.in_channels;
        for s in 0..self.depth {
            conv(format!("enc{s}"), cin, self.width(s), 3);
            cin = self.width(s);
        }
        for s in (0..self.depth).rev() {
            conv(format!("dec{s}"), cin + self.width(s), self.width(s), 3);
            cin = self.width(s);
        }
        let (h0, h1) = match self.head {
            HeadKind::DualConfidence => ("head_y", "head_c"),
            HeadKind::Gaussian => ("head_mu", "head_log_var"),
        };
        conv(h0.into(), cin, 1, 1);
        conv(h1.into(), cin, 1, 1);
        out
    }
}

/// Per-pixel density `y` and confidence `c`, each `B×1×H×W`, values in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DualPrediction {
    pub y: Tensor,
    pub c: Tensor,
}

/// Per-pixel mean and clamped log-variance, each `B×1×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl GaussianPrediction {
    pub fn sigma(&self) -> Vec<f32> {
        self.log_var.data().iter().map(|&lv| libm::expf(lv / 2.0)).collect()
    }
}

/// Mixture moments of an ensemble, each `B×1×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub mu: Tensor,
    pub var: Tensor,
}

/// Graph handles for a dual-head forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DualVars {
    pub y: Var,
    pub c: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub member_seeds: Vec<u64>,
}

impl EnsembleConfig {
    /// `members` distinct seeds derived from `base_seed`.
    pub fn derive(base_seed: u64, members: usize) -> Self {
        let member_seeds = (0..members as u64)
            .map(|i| base_seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
            .collect();
        Self { members, member_seeds }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members < 1 {
            return Err(Error::config("ensemble needs at least one member"));
        }
        if self.member_seeds.len() != self.members {
            return Err(Error::config(format!(
                "ensemble has {} members but {} seeds",
                self.members,
                self.member_seeds.len()
            )));
        }
        for (i, a) in self.member_seeds.iter().enumerate() {
            if self.member_seeds[..i].contains(a) {
                return Err(Error::config(format!("duplicate ensemble seed {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let t = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                let bound = libm::sqrtf(6.0 / fan_in);
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_parts(shape, data)
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            params,
        })
    }

    /// Reassembles a model from named tensors, checking names and shapes.
    pub fn from_parameters(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != named.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in layout.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            t.check_finite("from_parameters")?;
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf, `ParamId(i)` for slot `i`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.clone()))
            .collect()
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Runs the trunk and returns the two raw 1x1 head outputs.
    pub fn forward_heads(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<(Var, Var)> {
        let shape = tape.value(input).shape().to_vec();
        match shape[..] {
            [_, c, h, w] if c == self.config.in_channels => self.config.check_spatial(h, w)?,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "model",
                    lhs: shape,
                    rhs: alloc::vec![0, self.config.in_channels, 0, 0],
                })
            }
        }
        if params.len() != self.params.len() {
            return Err(Error::invalid("parameter handle count does not match model"));
        }
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut x = input;
        let mut p = 0;
        for _ in 0..depth {
            let h = tape.conv2d(x, params[p], Some(params[p + 1]), 1, 1)?;
            let h = tape.relu(h)?;
            skips.push(h);
            x = tape.maxpool2x(h)?;
            p += 2;
        }
        for s in (0..depth).rev() {
            let up = tape.upsample2x(x)?;
            let cat = tape.concat(&[up, skips[s]])?;
            let h = tape.conv2d(cat, params[p], Some(params[p + 1]), 1, 1)?;
            x = tape.relu(h)?;
            p += 2;
        }
        let a = tape.conv2d(x, params[p], Some(params[p + 1]), 1, 0)?;
        let b = tape.conv2d(x, params[p + 2], Some(params[p + 3]), 1, 0)?;
        Ok((a, b))
    }

    pub fn forward_dual(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<DualVars> {
        if self.config.head != HeadKind::DualConfidence {
            return Err(Error::config("forward_dual needs a dual_confidence head"));
        }
        let (a, b) = self.forward_heads(tape, params, input)?;
        Ok(DualVars {
            y: tape.sigmoid(a)?,
            c: tape.sigmoid(b)?,
        })
    }

    pub fn forward_gaussian(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<GaussianVars> {
        if self.config.head != HeadKind::Gaussian {
            return Err(Error::config("forward_gaussian needs a gaussian head"));
        }
        let (mu, raw) = self.forward_heads(tape, params, input)?;
        Ok(GaussianVars {
            mu,
            log_var: tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?,
        })
    }

    pub fn predict_dual(&self, batch: &Tensor) -> Result<DualPrediction> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward_dual(&mut tape, &params, x)?;
        Ok(DualPrediction {
            y: tape.value(out.y).clone(),
            c: tape.value(out.c).clone(),
        })
    }

    pub fn predict_gaussian(&self, batch: &Tensor) -> Result<GaussianPrediction> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward_gaussian(&mut tape, &params, x)?;
        Ok(GaussianPrediction {
            mu: tape.value(out.mu).clone(),
            log_var: tape.value(out.log_var).clone(),
        })
    }
}

/// Uniform-mixture moments: `mu = mean(mu_m)`, `var = mean(sigma_m^2) + var(mu_m)`.
pub fn ensemble_predict(members: &[Model], batch: &Tensor) -> Result<EnsemblePrediction> {
    let first = members.first().ok_or_else(|| Error::invalid("ensemble has no members"))?;
    if members.iter().any(|m| !m.config().same_shape(first.config())) {
        return Err(Error::config("ensemble members differ in architecture"));
    }
    let preds = members.iter().map(|m| m.predict_gaussian(batch)).collect::<Result<Vec<_>>>()?;
    let shape = preds[0].mu.shape().to_vec();
    let n = preds[0].mu.numel();
    let m = preds.len() as f64;
    let mut mu = alloc::vec![0.0f32; n];
    let mut var = alloc::vec![0.0f32; n];
    for i in 0..n {
        let mean: f64 = preds.iter().map(|p| p.mu.data()[i] as f64).sum::<f64>() / m;
        let aleatoric: f64 = preds.iter().map(|p| libm::exp(p.log_var.data()[i] as f64)).sum::<f64>() / m;
        let spread: f64 = preds
            .iter()
            .map(|p| {
                let d = p.mu.data()[i] as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / m;
        mu[i] = mean as f32;
        var[i] = (aleatoric + spread) as f32;
    }
    Ok(EnsemblePrediction {
        mu: Tensor::new(&shape, mu)?,
        var: Tensor::new(&shape, var)?,
    })
}
