//! Stochastic gradient descent with heavy-ball momentum.

use alloc::vec::Vec;

use crate::autodiff::{Gradients, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `v <- momentum * v + g; p <- p - lr * v`, with buffers kept across steps.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config(alloc::format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(alloc::format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    /// Updates `params[i]` with the gradient stored under `ParamId(i)`.
    ///
    /// The gradient map must cover exactly the given parameters. Nothing is
    /// written if any updated value would be non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients) -> Result<()> {
        for (id, _) in grads.iter() {
            if id.0 >= params.len() {
                return Err(Error::UnknownParameter(id.0));
            }
        }
        let mut staged = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let g = grads.get(ParamId(i)).ok_or(Error::MissingGradient(i))?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let v: Vec<f32> = match self.velocity.get(i) {
                Some(prev) if self.momentum > 0.0 => prev.iter().zip(g.data()).map(|(v, g)| self.momentum * v + g).collect(),
                _ => g.data().to_vec(),
            };
            let next: Vec<f32> = p.data().iter().zip(&v).map(|(p, v)| p - self.lr * v).collect();
            if next.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
            staged.push((v, next));
        }
        self.velocity.resize(params.len(), Vec::new());
        for (i, (v, next)) in staged.into_iter().enumerate() {
            params[i].data_mut().copy_from_slice(&next);
            self.velocity[i] = v;
        }
        Ok(())
    }
}
