//! Split-conformal correction of quantile intervals.
//!
//! One correction `q̂` is fitted per calibrated dimension (here: each horizon
//! step and coordinate), pooling all vehicles of the calibration windows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hstan::PredictionBatch;
use crate::numerics::Tensor2D;

/// `max(L − y, y − U)`: positive outside the interval, negative inside.
pub fn nonconformity(lower: f64, upper: f64, y: f64) -> f64 {
    (lower - y).max(y - upper)
}

/// Raw intervals and realised targets, stored per dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationSet {
    lower: Vec<Vec<f64>>,
    upper: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
}

impl CalibrationSet {
    pub fn new(dims: usize) -> Self {
        Self {
            lower: vec![Vec::new(); dims],
            upper: vec![Vec::new(); dims],
            target: vec![Vec::new(); dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.target.len()
    }

    /// Examples per dimension.
    pub fn len(&self) -> usize {
        self.target.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds one example: a raw interval and target for every dimension.
    pub fn push(&mut self, lower: &[f64], upper: &[f64], target: &[f64]) -> Result<()> {
        let d = self.dims();
        if lower.len() != d || upper.len() != d || target.len() != d {
            return Err(Error::Shape {
                op: "calibration example",
                left: (1, lower.len()),
                right: (1, d),
            });
        }
        if !lower.iter().chain(upper).chain(target).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("calibration example".into()));
        }
        for k in 0..d {
            self.lower[k].push(lower[k]);
            self.upper[k].push(upper[k]);
            self.target[k].push(target[k]);
        }
        Ok(())
    }

    /// Adds every vehicle of an uncalibrated forecast against its absolute
    /// truth (`N × 2T′`).
    pub fn push_batch(&mut self, pred: &PredictionBatch, truth: &Tensor2D) -> Result<()> {
        if truth.shape() != pred.point.shape() {
            return Err(Error::Shape {
                op: "calibration batch",
                left: pred.point.shape(),
                right: truth.shape(),
            });
        }
        for i in 0..truth.rows() {
            self.push(pred.lower.row(i), pred.upper.row(i), truth.row(i))?;
        }
        Ok(())
    }

    pub fn scores(&self, dim: usize) -> Vec<f64> {
        (0..self.len())
            .map(|i| nonconformity(self.lower[dim][i], self.upper[dim][i], self.target[dim][i]))
            .collect()
    }

    /// Raw-interval coverage pooled over all dimensions.
    pub fn raw_coverage(&self) -> f64 {
        let mut hit = 0usize;
        let mut total = 0usize;
        for k in 0..self.dims() {
            for i in 0..self.len() {
                let y = self.target[k][i];
                let (l, u) = ordered(self.lower[k][i], self.upper[k][i]);
                hit += usize::from(l <= y && y <= u);
                total += 1;
            }
        }
        hit as f64 / total.max(1) as f64
    }
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Per-dimension corrections fitted at level `alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalCorrection {
    pub alpha: f64,
    pub q_hat: Vec<f64>,
    pub n_cal: usize,
}

/// The `⌈(1−α)(n+1)⌉`-th smallest score, or the largest score when that
/// rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::range("alpha", alpha.to_string()));
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Guard against products like 0.8·5 landing a hair above an integer.
    let rank = (((1.0 - alpha) * (n as f64 + 1.0)) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

pub fn calibrate(cal: &CalibrationSet, alpha: f64) -> Result<ConformalCorrection> {
    if cal.is_empty() || cal.dims() == 0 {
        return Err(Error::Empty("calibration set"));
    }
    let q_hat = (0..cal.dims())
        .map(|k| conformal_quantile(&cal.scores(k), alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConformalCorrection {
        alpha,
        q_hat,
        n_cal: cal.len(),
    })
}

/// `[L − q̂, U + q̂]`; a crossed interval collapses to its midpoint.
pub fn conformal_interval(lower: f64, upper: f64, q_hat: f64) -> (f64, f64) {
    let (l, u) = (lower - q_hat, upper + q_hat);
    if l > u {
        let mid = 0.5 * (l + u);
        (mid, mid)
    } else {
        (l, u)
    }
}

/// Applies the per-column correction to a forecast.
pub fn apply_correction(pred: &PredictionBatch, corr: &ConformalCorrection) -> Result<PredictionBatch> {
    if corr.q_hat.len() != pred.point.cols() {
        return Err(Error::Shape {
            op: "apply_correction",
            left: pred.point.shape(),
            right: (1, corr.q_hat.len()),
        });
    }
    let mut out = pred.clone();
    for i in 0..pred.point.rows() {
        for (c, &q) in corr.q_hat.iter().enumerate() {
            let (l, u) = conformal_interval(pred.lower.get(i, c), pred.upper.get(i, c), q);
            out.lower.set(i, c, l);
            out.upper.set(i, c, u);
        }
    }
    out.calibrated = true;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub fraction: f64,
    pub mean_width: f64,
}

/// Fraction of targets with `L ≤ y ≤ U`, and the mean of `U − L`.
pub fn empirical_coverage(intervals: &[(f64, f64)], targets: &[f64]) -> Result<Coverage> {
    if intervals.len() != targets.len() {
        return Err(Error::Shape {
            op: "empirical_coverage",
            left: (intervals.len(), 2),
            right: (targets.len(), 1),
        });
    }
    if targets.is_empty() {
        return Err(Error::Empty("coverage evaluation set"));
    }
    let hit = intervals
        .iter()
        .zip(targets)
        .filter(|((l, u), y)| l <= y && *y <= u)
        .count();
    let width: f64 = intervals.iter().map(|(l, u)| u - l).sum();
    let n = targets.len() as f64;
    Ok(Coverage {
        fraction: hit as f64 / n,
        mean_width: width / n,
    })
}

/// Serialized calibration result, tied to the dataset it was fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub alpha: f64,
    pub q_hat: Vec<f64>,
    pub n_cal: usize,
    pub dataset_fingerprint: String,
    pub raw_coverage: f64,
    pub calibrated_coverage: f64,
}

impl CalibrationArtifact {
    pub fn correction(&self) -> ConformalCorrection {
        ConformalCorrection {
            alpha: self.alpha,
            q_hat: self.q_hat.clone(),
            n_cal: self.n_cal,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            kind: "calibration artifact",
            location: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}
