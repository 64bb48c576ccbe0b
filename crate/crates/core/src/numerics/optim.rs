//! Adam with bias correction and a cosine-annealed learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor2D>,
    second: BTreeMap<String, Tensor2D>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, path: &str) -> Option<&Tensor2D> {
        self.first.get(path)
    }

    pub fn second_moment(&self, path: &str) -> Option<&Tensor2D> {
        self.second.get(path)
    }

    pub(crate) fn moments(&self) -> impl Iterator<Item = (&str, &Tensor2D, &Tensor2D)> {
        self.first
            .iter()
            .map(move |(k, m)| (k.as_str(), m, &self.second[k]))
    }

    pub(crate) fn restore_moment(&mut self, path: &str, first: Tensor2D, second: Tensor2D) {
        self.first.insert(path.to_string(), first);
        self.second.insert(path.to_string(), second);
    }
}

/// One bias-corrected Adam update using the gradients currently held in
/// `params`.
pub fn adam_step(params: &mut ParameterStore, state: &mut OptimizerState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    for path in paths {
        let grad = params.grad(&path).expect("every parameter has a gradient").clone();
        let (rows, cols) = grad.shape();
        let m = state
            .first
            .entry(path.clone())
            .or_insert_with(|| Tensor2D::zeros(rows, cols));
        for (mi, gi) in m.data_mut().iter_mut().zip(grad.data()) {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
        }
        let v = state
            .second
            .entry(path.clone())
            .or_insert_with(|| Tensor2D::zeros(rows, cols));
        for (vi, gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
        }
        let (m, v) = (&state.first[&path], &state.second[&path]);
        let theta = params.get_mut(&path).expect("path taken from store");
        for ((p, mi), vi) in theta.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *p -= lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
        }
    }
}

/// Cosine annealing from `base` down to `min` over `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub min: f64,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-3,
            min: 0.0,
            total_epochs: 200,
        }
    }
}

pub fn cosine_lr(epoch: usize, sched: &LrSchedule) -> Result<f64> {
    if epoch > sched.total_epochs {
        return Err(Error::range(
            "epoch",
            format!("{epoch} > total {}", sched.total_epochs),
        ));
    }
    let frac = if sched.total_epochs == 0 {
        0.0
    } else {
        epoch as f64 / sched.total_epochs as f64
    };
    let rate = sched.min + 0.5 * (sched.base - sched.min) * (1.0 + (std::f64::consts::PI * frac).cos());
    Ok(rate.clamp(sched.min.min(sched.base), sched.base.max(sched.min)))
}
