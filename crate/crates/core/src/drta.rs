//! Risk potential and adaptive-threshold warnings.
//!
//! `R = w₁·R_pred + w₂·R_kin + w₃·R_geo` is computed per track and tick and
//! compared against `μ_R + λ·σ_R` over the track's recent history.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hstan::PredictionBatch;
use crate::scene_graph::SceneFrame;

/// Risk term weights and scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskWeights {
    /// `(w₁, w₂, w₃)` for the prediction, kinematic and geometric terms.
    pub w: [f64; 3],
    /// Time constant τ in seconds.
    pub tau: f64,
    pub v_safe: f64,
    pub a_max: f64,
    pub gamma: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for RiskWeights {
    fn default() -> Self {
        Self {
            w: [0.5, 0.3, 0.2],
            tau: 1.0,
            v_safe: 15.0,
            a_max: 8.0,
            gamma: 1.0,
            beta: 0.5,
            lambda: DrivingMode::Default.lambda(),
        }
    }
}

impl RiskWeights {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.w.iter().sum();
        if self.w.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("risk weights {:?} must be ≥ 0 and sum to 1", self.w)));
        }
        if !(self.tau > 0.0 && self.v_safe > 0.0 && self.a_max > 0.0) {
            return Err(Error::Config("tau, v_safe and a_max must be positive".into()));
        }
        if !(1.5..=3.0).contains(&self.lambda) {
            return Err(Error::range("lambda", format!("{} not in [1.5, 3.0]", self.lambda)));
        }
        Ok(())
    }
}

/// λ presets per driving context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DrivingMode {
    Highway,
    Urban,
    #[default]
    Default,
}

impl DrivingMode {
    pub fn lambda(self) -> f64 {
        match self {
            DrivingMode::Highway => 2.6,
            DrivingMode::Urban => 2.0,
            DrivingMode::Default => 2.2,
        }
    }
}

impl std::str::FromStr for DrivingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(Self::Highway),
            "urban" => Ok(Self::Urban),
            "default" => Ok(Self::Default),
            other => Err(Error::Config(format!("unknown driving mode `{other}`"))),
        }
    }
}

/// Decision-engine settings beyond the risk formula.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrtaConfig {
    pub weights: RiskWeights,
    /// Sliding window capacity W.
    pub window: usize,
    /// Values that must be buffered before any warning can fire.
    pub warmup: usize,
    /// Predicted centre distance that counts as contact for TTC.
    pub contact_radius: f64,
    /// Lower clamp on `d_min` in metres.
    pub d_min_floor: f64,
    /// When set, warnings compare against this constant instead of `μ + λσ`.
    pub fixed_threshold: Option<f64>,
}

impl Default for DrtaConfig {
    fn default() -> Self {
        Self {
            weights: RiskWeights::default(),
            window: 50,
            warmup: 5,
            contact_radius: 4.0,
            d_min_floor: 0.1,
            fixed_threshold: None,
        }
    }
}

impl DrtaConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.window < 2 || self.warmup < 2 || self.warmup > self.window {
            return Err(Error::Config(format!(
                "need 2 ≤ warmup ({}) ≤ window ({})",
                self.warmup, self.window
            )));
        }
        if !(self.contact_radius > 0.0 && self.d_min_floor > 0.0) {
            return Err(Error::Config("contact_radius and d_min_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskInputs {
    /// Minimum predicted ego-to-threat centre distance (m), `+∞` without threats.
    pub d_min: f64,
    /// Predicted time to contact (s), `+∞` when no contact is forecast.
    pub ttc: f64,
    pub sigma_pred: f64,
    /// Closing speed along the ego-threat line, positive when approaching.
    pub v_rel: f64,
    pub a_rel: f64,
    /// Signed road curvature (1/m).
    pub kappa: f64,
    pub v_ego: f64,
}

fn unit_towards(from: [f64; 2], to: [f64; 2]) -> Option<[f64; 2]> {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    let d = dx.hypot(dy);
    (d > 0.0).then(|| [dx / d, dy / d])
}

fn mean_width(pred: &PredictionBatch, i: usize) -> f64 {
    let cols = pred.point.cols();
    let total: f64 = (0..cols).map(|c| pred.upper.get(i, c) - pred.lower.get(i, c)).sum();
    total / cols as f64
}

/// Scans the forecast for `ego` against `threats` and reads kinematics from
/// the last observed `frame`.
///
/// The critical threat is the one with the smallest predicted distance; its
/// line of sight defines `v_rel` and `a_rel`, and `σ_pred` is half the mean
/// calibrated width over the ego and that threat.
pub fn extract_risk_inputs(
    pred: &PredictionBatch,
    ego: usize,
    threats: &[usize],
    frame: &SceneFrame,
    kappa: f64,
    dt: f64,
    contact_radius: f64,
) -> Result<RiskInputs> {
    let n = pred.vehicles();
    if ego >= n || frame.len() != n || threats.iter().any(|&j| j >= n || j == ego) {
        return Err(Error::range("track index", format!("ego {ego}, threats {threats:?}, {n} vehicles")));
    }
    let me = &frame.vehicles[ego];
    let mut d_min = f64::INFINITY;
    let mut critical = None;
    let mut first_contact = None;
    for k in 0..pred.steps {
        let p = pred.position(ego, k);
        for &j in threats {
            let q = pred.position(j, k);
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d < d_min {
                d_min = d;
                critical = Some(j);
            }
            if first_contact.is_none() && d <= contact_radius {
                first_contact = Some(k + 1);
            }
        }
    }
    let ttc = first_contact.map_or(f64::INFINITY, |k| k as f64 * dt);
    let (v_rel, a_rel, sigma) = match critical {
        Some(j) => {
            let other = &frame.vehicles[j];
            let sigma = 0.25 * (mean_width(pred, ego) + mean_width(pred, j));
            match unit_towards(me.position(), other.position()) {
                Some(u) => {
                    let dv = [me.vx - other.vx, me.vy - other.vy];
                    let da = [me.ax - other.ax, me.ay - other.ay];
                    (dv[0] * u[0] + dv[1] * u[1], da[0] * u[0] + da[1] * u[1], sigma)
                }
                None => (0.0, 0.0, sigma),
            }
        }
        None => (0.0, 0.0, 0.5 * mean_width(pred, ego)),
    };
    Ok(RiskInputs {
        d_min,
        ttc,
        sigma_pred: sigma.max(0.0),
        v_rel,
        a_rel,
        kappa,
        v_ego: me.speed(),
    })
}

/// `(1/d_min)·exp(−TTC/τ)·(1 + σ_pred)` with `d_min` clamped below at `floor`.
pub fn risk_pred(inp: &RiskInputs, w: &RiskWeights, floor: f64) -> f64 {
    if inp.ttc.is_infinite() || inp.d_min.is_infinite() {
        return 0.0;
    }
    (1.0 / inp.d_min.max(floor)) * (-inp.ttc / w.tau).exp() * (1.0 + inp.sigma_pred)
}

/// `v_rel/v_safe + γ·a_rel/a_max`, with the velocity ratio clamped at −1.
pub fn risk_kin(inp: &RiskInputs, w: &RiskWeights) -> f64 {
    (inp.v_rel / w.v_safe).max(-1.0) + w.gamma * inp.a_rel / w.a_max
}

/// `1 + β·|κ|·v_ego`.
pub fn risk_geo(inp: &RiskInputs, w: &RiskWeights) -> f64 {
    1.0 + w.beta * inp.kappa.abs() * inp.v_ego
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskTerms {
    pub r_pred: f64,
    pub r_kin: f64,
    pub r_geo: f64,
}

impl RiskTerms {
    pub fn evaluate(inp: &RiskInputs, w: &RiskWeights, floor: f64) -> Self {
        Self {
            r_pred: risk_pred(inp, w, floor),
            r_kin: risk_kin(inp, w),
            r_geo: risk_geo(inp, w),
        }
    }

    pub fn total(&self, w: &RiskWeights) -> f64 {
        w.w[0] * self.r_pred + w.w[1] * self.r_kin + w.w[2] * self.r_geo
    }
}

pub fn risk_total(inp: &RiskInputs, w: &RiskWeights, floor: f64) -> f64 {
    RiskTerms::evaluate(inp, w, floor).total(w)
}

/// Bounded FIFO of recent risk values.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidingWindow {
    capacity: usize,
    values: VecDeque<f64>,
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            values: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }
}

/// Mean and sample standard deviation (`n − 1` denominator) of the buffered
/// values; a single value has σ = 0. Deviations are accumulated relative to
/// the oldest value so a constant window gives exactly `(c, 0)`.
pub fn window_stats(w: &SlidingWindow) -> Option<(f64, f64)> {
    let n = w.len();
    let shift = *w.values.front()?;
    let mean_dev = w.values().map(|v| v - shift).sum::<f64>() / n as f64;
    let mu = shift + mean_dev;
    if n < 2 {
        return Some((mu, 0.0));
    }
    let ss: f64 = w.values().map(|v| (v - shift - mean_dev).powi(2)).sum();
    Some((mu, (ss / (n - 1) as f64).sqrt()))
}

pub fn dynamic_threshold(mu: f64, sigma: f64, lambda: f64) -> f64 {
    mu + lambda * sigma
}

/// One decision record; `threshold`, `mu` and `sigma` are absent during
/// warm-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarningEvent {
    pub episode_id: u64,
    pub tick: usize,
    pub time: f64,
    pub track_id: u32,
    pub r: f64,
    pub r_pred: f64,
    pub r_kin: f64,
    pub r_geo: f64,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub threshold: Option<f64>,
    pub triggered: bool,
}

/// Strict comparison `R > T_dyn`.
pub fn decide(r: f64, threshold: f64) -> bool {
    r > threshold
}

/// Per-track sliding-window state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub track_id: u32,
    window: SlidingWindow,
    ticks: usize,
}

impl TrackState {
    pub fn new(track_id: u32, cfg: &DrtaConfig) -> Self {
        Self {
            track_id,
            window: SlidingWindow::new(cfg.window),
            ticks: 0,
        }
    }

    pub fn window(&self) -> &SlidingWindow {
        &self.window
    }

    /// Scores `inp`, compares against the threshold of the values seen so
    /// far, then buffers the new value.
    pub fn step(&mut self, inp: &RiskInputs, cfg: &DrtaConfig, time: f64) -> WarningEvent {
        let terms = RiskTerms::evaluate(inp, &cfg.weights, cfg.d_min_floor);
        let r = terms.total(&cfg.weights);
        self.step_value(r, terms, cfg, time)
    }

    /// As [`TrackState::step`] for an already computed risk value.
    pub fn step_value(&mut self, r: f64, terms: RiskTerms, cfg: &DrtaConfig, time: f64) -> WarningEvent {
        let stats = if self.window.len() >= cfg.warmup {
            window_stats(&self.window)
        } else {
            None
        };
        let threshold = match cfg.fixed_threshold {
            Some(t) => Some(t),
            None => stats.map(|(mu, sigma)| dynamic_threshold(mu, sigma, cfg.weights.lambda)),
        };
        let ev = WarningEvent {
            episode_id: 0,
            tick: self.ticks,
            time,
            track_id: self.track_id,
            r,
            r_pred: terms.r_pred,
            r_kin: terms.r_kin,
            r_geo: terms.r_geo,
            mu: stats.map(|s| s.0),
            sigma: stats.map(|s| s.1),
            threshold,
            triggered: threshold.is_some_and(|t| decide(r, t)),
        };
        self.window.push(r);
        self.ticks += 1;
        ev
    }
}

/// Replays a bare risk stream through one track and returns the triggered
/// tick indices.
pub fn replay_stream(stream: &[f64], cfg: &DrtaConfig) -> Vec<usize> {
    let zero = RiskTerms {
        r_pred: 0.0,
        r_kin: 0.0,
        r_geo: 0.0,
    };
    let mut track = TrackState::new(0, cfg);
    stream
        .iter()
        .enumerate()
        .filter_map(|(i, &r)| track.step_value(r, zero, cfg, i as f64).triggered.then_some(i))
        .collect()
}

/// Writes events as JSON lines.
pub fn write_event_log(path: &Path, events: &[WarningEvent]) -> Result<()> {
    let mut out = Vec::new();
    for e in events {
        serde_json::to_writer(&mut out, e).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_event_log(path: &Path) -> Result<Vec<WarningEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                kind: "event log",
                location: format!("{}:{}", path.display(), i + 1),
                detail: e.to_string(),
            })
        })
        .collect()
}
