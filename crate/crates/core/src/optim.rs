//! First-order optimizers over flat parameter slices.
//!
//! A model whose parameters live in several buffers calls [`Optimizer::begin_step`]
//! once, then [`Optimizer::update`] per buffer with that buffer's offset into
//! the virtual flat vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let state = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Ok(Self {
            kind,
            lr,
            m: vec![0.0; state],
            v: vec![0.0; state],
            t: 0,
        })
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one update to `params[..]`, located at `offset` in the flat layout.
    pub fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
                let m = &mut self.m[offset..offset + params.len()];
                let v = &mut self.v[offset..offset + params.len()];
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.begin_step();
        self.update(0, params, grads);
    }
}

/// Global L2 norm over several gradient buffers.
pub fn grad_norm<'a, I: IntoIterator<Item = &'a [f64]>>(buffers: I) -> f64 {
    buffers
        .into_iter()
        .flat_map(|b| b.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(buffers: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grad_norm(buffers.iter().map(|b| &**b));
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for b in buffers.iter_mut() {
            b.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
