//! Scaling and latency measurements on synthetic scenes of constant density.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hstan::{forward_on_tape, HstanModel};
use crate::metrics::{percentile, LatencySummary};
use crate::numerics::Tape;
use crate::scenario::LANE_WIDTH;
use crate::scene_graph::{build_adjacency, SceneFrame, VehicleObservation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub lanes: usize,
    /// Longitudinal spacing between consecutive vehicles of one lane (m).
    pub spacing: f64,
    /// Timed forward passes per size.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![10, 20, 40, 80, 120],
            lanes: 3,
            spacing: 15.0,
            repeats: 20,
            seed: 0,
        }
    }
}

/// `frames` frames of `n` vehicles cruising on a multi-lane road; the road
/// length grows with `n` so the density stays fixed.
pub fn constant_density_scene(n: usize, cfg: &BenchConfig, frames: usize, dt: f64) -> Vec<SceneFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (n as u64).wrapping_mul(0x9E37_79B9));
    let lanes = cfg.lanes.max(1);
    let start: Vec<(f64, f64, f64)> = (0..n)
        .map(|i| {
            let s = (i / lanes) as f64 * cfg.spacing + rng.gen_range(-0.2..0.2) * cfg.spacing;
            (s, (i % lanes) as f64 * LANE_WIDTH, rng.gen_range(15.0..25.0))
        })
        .collect();
    (0..frames)
        .map(|k| {
            let t = k as f64 * dt;
            SceneFrame {
                timestamp: t,
                vehicles: start
                    .iter()
                    .enumerate()
                    .map(|(i, &(s, l, v))| VehicleObservation {
                        id: i as u32,
                        x: s + v * t,
                        y: l,
                        vx: v,
                        vy: 0.0,
                        ax: 0.0,
                        ay: 0.0,
                        length: 4.5,
                        width: 1.8,
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Coefficient of determination of a least-squares polynomial fit.
pub fn poly_r2(x: &[f64], y: &[f64], degree: usize) -> Result<f64> {
    if x.len() != y.len() || x.len() <= degree {
        return Err(Error::range("fit", format!("{} points for degree {degree}", x.len())));
    }
    let a = DMatrix::from_fn(x.len(), degree + 1, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Infeasible(e.to_string()))?;
    let fitted = &a * coef;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(y, f)| (y - f).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|y| (y - mean).powi(2)).sum();
    Ok(if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    /// Directed edges of the first frame's radius graph, self-loops included.
    pub edges: usize,
    /// Graph-attention scores evaluated by one forward pass.
    pub attention_scores: u64,
    /// Scores a dense all-pairs attention would evaluate for the same pass.
    pub all_pairs_scores: u64,
    pub latency: LatencySummary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub linear_r2: f64,
    pub quadratic_r2: f64,
}

impl Fit {
    fn of(x: &[f64], y: &[f64]) -> Result<Self> {
        Ok(Self {
            linear_r2: poly_r2(x, y, 1)?,
            quadratic_r2: poly_r2(x, y, 2)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub edges_fit: Fit,
    pub scores_fit: Fit,
    pub all_pairs_fit: Fit,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# scaling benchmark\n");
        s.push_str(&format!(
            "{:>5} {:>8} {:>12} {:>12} {:>9} {:>9} {:>9}\n",
            "N", "edges", "scores", "all_pairs", "p50_ms", "p95_ms", "p99_ms"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:>5} {:>8} {:>12} {:>12} {:>9.3} {:>9.3} {:>9.3}\n",
                r.n, r.edges, r.attention_scores, r.all_pairs_scores, r.latency.p50_ms, r.latency.p95_ms, r.latency.p99_ms
            ));
        }
        for (name, f) in [("edges", self.edges_fit), ("scores", self.scores_fit), ("all_pairs", self.all_pairs_fit)] {
            s.push_str(&format!("{name}_linear_r2={}\n{name}_quadratic_r2={}\n", f.linear_r2, f.quadratic_r2));
        }
        s
    }
}

/// Counts and times one model forward pass per scene size.
pub fn run_bench(model: &HstanModel, cfg: &BenchConfig) -> Result<BenchReport> {
    let c = &model.config;
    let mut rows = Vec::with_capacity(cfg.sizes.len());
    for &n in &cfg.sizes {
        if n == 0 {
            return Err(Error::range("scene size", "N must be ≥ 1"));
        }
        let scene = constant_density_scene(n, cfg, c.obs_steps, c.dt);
        let edges = build_adjacency(&scene[0], c.radius)?.edge_count();
        let mut tape = Tape::new();
        let b = tape.bind(&model.params);
        forward_on_tape(model, &mut tape, &b, &scene)?;
        let scores = tape.stats().attention_scores;
        let passes = if c.use_sam { (c.obs_steps * c.sam_layers * c.sam_heads) as u64 } else { 0 };
        let mut times = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats.max(1) {
            let t = Instant::now();
            let mut tape = Tape::new();
            let b = tape.bind(&model.params);
            forward_on_tape(model, &mut tape, &b, &scene)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(BenchRow {
            n,
            edges,
            attention_scores: scores,
            all_pairs_scores: passes * (n * n) as u64,
            latency: LatencySummary {
                p50_ms: percentile(&times, 0.5).unwrap_or(0.0),
                p95_ms: percentile(&times, 0.95).unwrap_or(0.0),
                p99_ms: percentile(&times, 0.99).unwrap_or(0.0),
            },
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let col = |f: fn(&BenchRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (edges_fit, scores_fit, all_pairs_fit) = if rows.len() >= 3 {
        (
            Fit::of(&x, &col(|r| r.edges as f64))?,
            Fit::of(&x, &col(|r| r.attention_scores as f64))?,
            Fit::of(&x, &col(|r| r.all_pairs_scores as f64))?,
        )
    } else {
        let nan = Fit {
            linear_r2: f64::NAN,
            quadratic_r2: f64::NAN,
        };
        (nan, nan, nan)
    };
    Ok(BenchReport {
        rows,
        edges_fit,
        scores_fit,
        all_pairs_fit,
    })
}
