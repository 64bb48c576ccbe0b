//! End-to-end commands: generate, train, calibrate, warn, evaluate and
//! ablate. Each command reads and writes plain files so runs can be chained
//! from the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::cqr::{apply_correction, calibrate, empirical_coverage, CalibrationArtifact, CalibrationSet, ConformalCorrection};
use crate::drta::{extract_risk_inputs, write_event_log, read_event_log, DrivingMode, DrtaConfig, TrackState, WarningEvent};
use crate::error::{Error, Result};
use crate::hstan::{hstan_forward, predict_all, EpochRecord, HstanConfig, HstanModel, PredictionBatch, TrainConfig, TrainState};
use crate::metrics::{ade, awlt, classification, collision_rate, compensated_mean, fde, EvalReport, LatencySummary};
use crate::numerics::Tensor2D;
use crate::scenario::{cv_baseline, fingerprint, make_dataset, DatasetConfig, Episode, Label, Split, SplitDataset, TrajectoryDataset, CONTACT_THRESHOLD};

/// Threshold used by a bare `fixed_threshold` switch.
pub const DEFAULT_FIXED_THRESHOLD: f64 = 0.5;

/// Model-construction and decision switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ablation {
    NoSam,
    NoTam,
    SingleHead,
    FixedThreshold(f64),
    NoCqr,
    NoCollisionLoss,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoSam,
        Ablation::NoTam,
        Ablation::SingleHead,
        Ablation::FixedThreshold(DEFAULT_FIXED_THRESHOLD),
        Ablation::NoCqr,
        Ablation::NoCollisionLoss,
    ];

    /// Whether the switch changes the trained model.
    pub fn affects_training(self) -> bool {
        matches!(self, Ablation::NoSam | Ablation::NoTam | Ablation::SingleHead | Ablation::NoCollisionLoss)
    }

    /// Comma-separated list, e.g. `no_sam,fixed_threshold=0.4`.
    pub fn parse_list(s: &str) -> Result<Vec<Ablation>> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::NoSam => f.write_str("no_sam"),
            Ablation::NoTam => f.write_str("no_tam"),
            Ablation::SingleHead => f.write_str("single_head"),
            Ablation::FixedThreshold(v) => write!(f, "fixed_threshold={v}"),
            Ablation::NoCqr => f.write_str("no_cqr"),
            Ablation::NoCollisionLoss => f.write_str("no_collision_loss"),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, value) = match s.split_once(['=', '(']) {
            Some((n, v)) => (n.trim(), Some(v.trim_end_matches(')').trim())),
            None => (s.trim(), None),
        };
        let bad = || Error::Config(format!("unknown ablation switch `{s}`"));
        let a = match name {
            "no_sam" => Ablation::NoSam,
            "no_tam" => Ablation::NoTam,
            "single_head" => Ablation::SingleHead,
            "no_cqr" => Ablation::NoCqr,
            "no_collision_loss" => Ablation::NoCollisionLoss,
            "fixed_threshold" => {
                let v = match value {
                    Some(v) => v.parse::<f64>().map_err(|_| bad())?,
                    None => DEFAULT_FIXED_THRESHOLD,
                };
                return Ok(Ablation::FixedThreshold(v));
            }
            _ => return Err(bad()),
        };
        if value.is_some() {
            return Err(bad());
        }
        Ok(a)
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.to_string()
    }
}

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for parameter initialisation and batch order.
    pub seed: u64,
    /// Seed for the train/calibration/test episode split.
    pub split_seed: u64,
    /// Miscoverage level of the conformal intervals.
    pub alpha: f64,
    /// λ preset; overrides `risk.weights.lambda` when set.
    pub mode: Option<DrivingMode>,
    pub ablations: Vec<Ablation>,
    pub dataset: DatasetConfig,
    pub model: HstanConfig,
    pub train: TrainConfig,
    pub risk: DrtaConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split_seed: 1,
            alpha: 0.1,
            mode: None,
            ablations: Vec::new(),
            dataset: DatasetConfig::default(),
            model: HstanConfig::default(),
            train: TrainConfig::default(),
            risk: DrtaConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(d) => Error::Format {
                kind: "run config",
                location: path.display().to_string(),
                detail: d,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Configuration after applying `mode` and every ablation switch.
    pub fn effective(&self) -> Result<Self> {
        let mut c = self.clone();
        if let Some(m) = c.mode {
            c.risk.weights.lambda = m.lambda();
        }
        for a in &self.ablations {
            match *a {
                Ablation::NoSam => c.model.use_sam = false,
                Ablation::NoTam => c.model.use_tam = false,
                Ablation::SingleHead => c.model = c.model.clone().single_head(),
                Ablation::FixedThreshold(v) => c.risk.fixed_threshold = Some(v),
                Ablation::NoCqr => {}
                Ablation::NoCollisionLoss => c.model.collision_weight = 0.0,
            }
        }
        c.model.validate()?;
        c.risk.validate()?;
        if !(c.alpha > 0.0 && c.alpha < 1.0) {
            return Err(Error::range("alpha", format!("{} not in (0, 1)", c.alpha)));
        }
        Ok(c)
    }

    pub fn no_cqr(&self) -> bool {
        self.ablations.contains(&Ablation::NoCqr)
    }
}

/// Counts printed by [`cmd_gen`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub episodes: usize,
    pub danger_episodes: usize,
    pub windows: BTreeMap<Split, usize>,
    pub fingerprint: String,
}

/// Generates the dataset described by `cfg` into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<GenSummary> {
    let d = make_dataset(&cfg.dataset.specs(), cfg.model.obs_steps, cfg.model.pred_steps, cfg.split_seed)?;
    d.data.write(out, &d.split)?;
    let windows = [Split::Train, Split::Cal, Split::Test]
        .into_iter()
        .map(|s| {
            let n = d
                .episodes(s)
                .map(|e| e.window_count(cfg.model.obs_steps, cfg.model.pred_steps))
                .sum();
            (s, n)
        })
        .collect();
    Ok(GenSummary {
        episodes: d.data.episodes.len(),
        danger_episodes: d.data.episodes.iter().filter(|e| e.label.danger).count(),
        windows,
        fingerprint: fingerprint(out)?,
    })
}

pub fn load_dataset(dir: &Path) -> Result<SplitDataset> {
    let (data, split) = TrajectoryDataset::read(dir)?;
    Ok(SplitDataset { data, split })
}

/// Path of the per-epoch loss log written next to a checkpoint.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

fn write_loss_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on the training split, optionally resuming from `resume`, and
/// writes the checkpoint plus its loss log.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    mut log: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    let cfg = cfg.effective()?;
    let data = load_dataset(data_dir)?;
    let windows = data.windows(Split::Train, cfg.model.obs_steps, cfg.model.pred_steps);
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            if s.model.config != cfg.model {
                return Err(Error::Config(format!("checkpoint {} was trained with a different model config", p.display())));
            }
            s
        }
        None => TrainState::new(cfg.model.clone(), &windows, cfg.seed)?,
    };
    state.train_until(&windows, &cfg.train, |r| {
        log(r);
        Ok(())
    })?;
    state.save(out)?;
    write_loss_log(&loss_log_path(out), &state.history)?;
    Ok(state)
}

/// Calibration outcome with held-out coverage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrateSummary {
    pub artifact: CalibrationArtifact,
    pub test_raw_coverage: Option<f64>,
    pub test_calibrated_coverage: Option<f64>,
    pub test_raw_width: Option<f64>,
    pub test_calibrated_width: Option<f64>,
}

fn interval_pairs(batches: &[PredictionBatch]) -> Vec<(f64, f64)> {
    batches
        .iter()
        .flat_map(|b| b.lower.data().iter().zip(b.upper.data()).map(|(l, u)| (*l, *u)))
        .collect()
}

fn flat_targets(windows: &[crate::hstan::Window]) -> Vec<f64> {
    windows.iter().flat_map(|w| w.future.data().to_vec()).collect()
}

/// Fits per-dimension corrections on the calibration split and writes the
/// artifact to `out`.
pub fn cmd_calibrate(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<CalibrateSummary> {
    let cfg = cfg.effective()?;
    let state = TrainState::load(checkpoint)?;
    let model = &state.model;
    let data = load_dataset(data_dir)?;
    let (obs, pred) = (model.config.obs_steps, model.config.pred_steps);
    let cal = data.windows(Split::Cal, obs, pred);
    if cal.is_empty() {
        return Err(Error::Empty("calibration split"));
    }
    let cal_pred = predict_all(model, &cal)?;
    let mut set = CalibrationSet::new(2 * pred);
    for (p, w) in cal_pred.iter().zip(&cal) {
        set.push_batch(p, &w.future)?;
    }
    let corr = calibrate(&set, cfg.alpha)?;
    let calibrated: Vec<PredictionBatch> = cal_pred.iter().map(|p| apply_correction(p, &corr)).collect::<Result<_>>()?;
    let iv = interval_pairs(&calibrated);
    let cal_cov = empirical_coverage(&iv, &flat_targets(&cal))?;
    let artifact = CalibrationArtifact {
        alpha: corr.alpha,
        q_hat: corr.q_hat.clone(),
        n_cal: corr.n_cal,
        dataset_fingerprint: fingerprint(data_dir)?,
        raw_coverage: set.raw_coverage(),
        calibrated_coverage: cal_cov.fraction,
    };
    artifact.save(out)?;

    let test = data.windows(Split::Test, obs, pred);
    let mut summary = CalibrateSummary {
        artifact,
        test_raw_coverage: None,
        test_calibrated_coverage: None,
        test_raw_width: None,
        test_calibrated_width: None,
    };
    if !test.is_empty() {
        let raw = predict_all(model, &test)?;
        let targets = flat_targets(&test);
        let riv = interval_pairs(&raw);
        let r = empirical_coverage(&riv, &targets)?;
        let cal_test: Vec<PredictionBatch> = raw.iter().map(|p| apply_correction(p, &corr)).collect::<Result<_>>()?;
        let civ = interval_pairs(&cal_test);
        let c = empirical_coverage(&civ, &targets)?;
        summary.test_raw_coverage = Some(r.fraction);
        summary.test_raw_width = Some(r.mean_width);
        summary.test_calibrated_coverage = Some(c.fraction);
        summary.test_calibrated_width = Some(c.mean_width);
    }
    Ok(summary)
}

/// Source of forecasts during replay.
pub enum Predictor<'a> {
    Model {
        model: &'a HstanModel,
        correction: Option<&'a ConformalCorrection>,
    },
    /// Constant-velocity extrapolation with zero-width intervals.
    ConstantVelocity { steps: usize },
}

impl Predictor<'_> {
    fn predict(&self, history: &[crate::scene_graph::SceneFrame], dt: f64) -> Result<PredictionBatch> {
        match self {
            Predictor::Model { model, correction } => {
                let (_, raw) = hstan_forward(model, history)?;
                match correction {
                    Some(c) => apply_correction(&raw, c),
                    None => Ok(raw),
                }
            }
            Predictor::ConstantVelocity { steps } => {
                let p = cv_baseline(history, *steps, dt)?;
                Ok(PredictionBatch {
                    ids: history[0].vehicles.iter().map(|v| v.id).collect(),
                    steps: *steps,
                    lower: p.clone(),
                    upper: p.clone(),
                    point: p,
                    calibrated: false,
                })
            }
        }
    }
}

/// One forecast made during replay; `tick` is the last observed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TickForecast {
    pub episode_id: u64,
    pub tick: usize,
    pub batch: PredictionBatch,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayOutput {
    pub events: Vec<WarningEvent>,
    pub forecasts: Vec<TickForecast>,
    pub latencies_ms: Vec<f64>,
}

/// Feeds an episode tick by tick through forecasting and the decision
/// engine, one track per vehicle.
pub fn replay_episode(predictor: &Predictor, ep: &Episode, risk: &DrtaConfig, obs: usize, no_cqr: bool) -> Result<ReplayOutput> {
    let mut out = ReplayOutput::default();
    let Some(first) = ep.frames.first() else {
        return Ok(out);
    };
    let n = first.len();
    let mut tracks: Vec<TrackState> = first.vehicles.iter().map(|v| TrackState::new(v.id, risk)).collect();
    for tick in obs.saturating_sub(1)..ep.frames.len() {
        let history = &ep.frames[tick + 1 - obs..=tick];
        let start = Instant::now();
        let batch = predictor.predict(history, ep.dt)?;
        out.latencies_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let last = &ep.frames[tick];
        for (i, track) in tracks.iter_mut().enumerate() {
            let threats: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut inp = extract_risk_inputs(&batch, i, &threats, last, ep.kappa, ep.dt, risk.contact_radius)?;
            if no_cqr {
                inp.sigma_pred = 0.0;
            }
            let mut ev = track.step(&inp, risk, last.timestamp);
            ev.episode_id = ep.id;
            ev.tick = tick;
            out.events.push(ev);
        }
        out.forecasts.push(TickForecast {
            episode_id: ep.id,
            tick,
            batch,
        });
    }
    Ok(out)
}

/// Replays many episodes in parallel; output is ordered by episode, tick and
/// track regardless of scheduling.
pub fn replay_all(predictor: &Predictor, episodes: &[&Episode], risk: &DrtaConfig, obs: usize, no_cqr: bool) -> Result<ReplayOutput> {
    let parts: Vec<ReplayOutput> = episodes
        .par_iter()
        .map(|e| replay_episode(predictor, e, risk, obs, no_cqr))
        .collect::<Result<_>>()?;
    let mut out = ReplayOutput::default();
    for p in parts {
        out.events.extend(p.events);
        out.forecasts.extend(p.forecasts);
        out.latencies_ms.extend(p.latencies_ms);
    }
    out.events.sort_by_key(|e| (e.episode_id, e.tick, e.track_id));
    out.forecasts.sort_by_key(|f| (f.episode_id, f.tick));
    Ok(out)
}

pub const EVENTS_FILE: &str = "events.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const LATENCY_FILE: &str = "latency.json";

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    episode_id: u64,
    tick: usize,
    vehicle_id: u32,
    step: usize,
    x: f64,
    y: f64,
    lower_x: f64,
    lower_y: f64,
    upper_x: f64,
    upper_y: f64,
}

pub fn write_forecasts(path: &Path, forecasts: &[TickForecast]) -> Result<()> {
    let err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for f in forecasts {
        let b = &f.batch;
        for (i, &vehicle_id) in b.ids.iter().enumerate() {
            for k in 0..b.steps {
                let (p, l, u) = (b.position(i, k), b.lower_at(i, k), b.upper_at(i, k));
                w.serialize(PredictionRow {
                    episode_id: f.episode_id,
                    tick: f.tick,
                    vehicle_id,
                    step: k + 1,
                    x: p[0],
                    y: p[1],
                    lower_x: l[0],
                    lower_y: l[1],
                    upper_x: u[0],
                    upper_y: u[1],
                })
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_forecasts(path: &Path) -> Result<Vec<TickForecast>> {
    let err = |e: csv::Error| Error::Format {
        kind: "predictions",
        location: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut grouped: BTreeMap<(u64, usize), Vec<PredictionRow>> = BTreeMap::new();
    for row in r.deserialize::<PredictionRow>() {
        let row = row.map_err(err)?;
        grouped.entry((row.episode_id, row.tick)).or_default().push(row);
    }
    let mut out = Vec::with_capacity(grouped.len());
    for ((episode_id, tick), rows) in grouped {
        let steps = rows.iter().map(|r| r.step).max().unwrap_or(0);
        let mut ids: Vec<u32> = Vec::new();
        for r in &rows {
            if !ids.contains(&r.vehicle_id) {
                ids.push(r.vehicle_id);
            }
        }
        if rows.len() != ids.len() * steps {
            return Err(Error::Format {
                kind: "predictions",
                location: format!("{}: episode {episode_id} tick {tick}", path.display()),
                detail: "incomplete forecast block".into(),
            });
        }
        let mut point = Tensor2D::zeros(ids.len(), 2 * steps);
        let mut lower = point.clone();
        let mut upper = point.clone();
        for r in &rows {
            let i = ids.iter().position(|&v| v == r.vehicle_id).expect("collected above");
            let c = 2 * (r.step - 1);
            point.set(i, c, r.x);
            point.set(i, c + 1, r.y);
            lower.set(i, c, r.lower_x);
            lower.set(i, c + 1, r.lower_y);
            upper.set(i, c, r.upper_x);
            upper.set(i, c + 1, r.upper_y);
        }
        out.push(TickForecast {
            episode_id,
            tick,
            batch: PredictionBatch {
                ids,
                steps,
                point,
                lower,
                upper,
                calibrated: true,
            },
        });
    }
    Ok(out)
}

/// Files written by [`cmd_warn`].
#[derive(Clone, Debug, PartialEq)]
pub struct WarnSummary {
    pub episodes: usize,
    pub events: usize,
    pub triggered: usize,
    pub latency: Option<LatencySummary>,
}

/// Replays every test episode and writes the event log, forecasts and
/// latency samples into `out_dir`.
pub fn cmd_warn(cfg: &RunConfig, checkpoint: &Path, calibration: Option<&Path>, data_dir: &Path, out_dir: &Path) -> Result<WarnSummary> {
    let cfg = cfg.effective()?;
    let state = TrainState::load(checkpoint)?;
    let data = load_dataset(data_dir)?;
    let artifact = match (calibration, cfg.no_cqr()) {
        (Some(p), false) => {
            let a = CalibrationArtifact::load(p)?;
            let fp = fingerprint(data_dir)?;
            if a.dataset_fingerprint != fp {
                return Err(Error::Config(format!(
                    "calibration {} was fitted on dataset {} but {} has fingerprint {fp}",
                    p.display(),
                    a.dataset_fingerprint,
                    data_dir.display()
                )));
            }
            Some(a.correction())
        }
        _ => None,
    };
    let predictor = Predictor::Model {
        model: &state.model,
        correction: artifact.as_ref(),
    };
    let episodes: Vec<&Episode> = data.episodes(Split::Test).collect();
    let out = replay_all(&predictor, &episodes, &cfg.risk, state.model.config.obs_steps, cfg.no_cqr())?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_event_log(&out_dir.join(EVENTS_FILE), &out.events)?;
    write_forecasts(&out_dir.join(PREDICTIONS_FILE), &out.forecasts)?;
    let latency = LatencySummary::from_samples(&out.latencies_ms);
    let lp = out_dir.join(LATENCY_FILE);
    let text = serde_json::to_string_pretty(&latency).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&lp, text + "\n").map_err(|e| Error::io(&lp, e))?;
    Ok(WarnSummary {
        episodes: episodes.len(),
        events: out.events.len(),
        triggered: out.events.iter().filter(|e| e.triggered).count(),
        latency,
    })
}

fn future_truth(ep: &Episode, tick: usize, steps: usize) -> Option<Tensor2D> {
    if tick + steps >= ep.frames.len() {
        return None;
    }
    let n = ep.frames[tick].len();
    let mut t = Tensor2D::zeros(n, 2 * steps);
    for k in 0..steps {
        for (i, v) in ep.frames[tick + 1 + k].vehicles.iter().enumerate() {
            t.set(i, 2 * k, v.x);
            t.set(i, 2 * k + 1, v.y);
        }
    }
    Some(t)
}

/// Builds the report from replayed events and forecasts against the test
/// split of `data`.
pub fn evaluate(name: &str, data: &SplitDataset, events: &[WarningEvent], forecasts: &[TickForecast], latencies_ms: Option<&[f64]>) -> Result<EvalReport> {
    let labels: BTreeMap<u64, Label> = data.episodes(Split::Test).map(|e| (e.id, e.label)).collect();
    let episodes: BTreeMap<u64, &Episode> = data.episodes(Split::Test).map(|e| (e.id, e)).collect();
    let test_events: Vec<WarningEvent> = events.iter().filter(|e| labels.contains_key(&e.episode_id)).cloned().collect();
    let (counts, leads) = classification(&test_events, &labels)?;

    let mut ades = Vec::new();
    let mut fdes = Vec::new();
    let mut points = Vec::new();
    let mut intervals = Vec::new();
    let mut targets = Vec::new();
    for f in forecasts {
        let Some(ep) = episodes.get(&f.episode_id) else { continue };
        let Some(truth) = future_truth(ep, f.tick, f.batch.steps) else { continue };
        ades.push(ade(&f.batch.point, &truth)?);
        fdes.push(fde(&f.batch.point, &truth)?);
        points.push(f.batch.point.clone());
        intervals.extend(f.batch.lower.data().iter().zip(f.batch.upper.data()).map(|(l, u)| (*l, *u)));
        targets.extend_from_slice(truth.data());
    }
    if ades.is_empty() {
        return Err(Error::Empty("forecasts with a complete future"));
    }
    let refs: Vec<&Tensor2D> = points.iter().collect();
    let cov = empirical_coverage(&intervals, &targets)?;
    Ok(EvalReport {
        name: name.to_string(),
        windows: ades.len(),
        ade: compensated_mean(ades.iter().copied()).unwrap_or(0.0),
        fde: compensated_mean(fdes.iter().copied()).unwrap_or(0.0),
        collision_rate: collision_rate(&refs, CONTACT_THRESHOLD)?,
        counts,
        awlt: awlt(&leads),
        coverage: Some(cov.fraction),
        mean_width: Some(cov.mean_width),
        latency: latencies_ms.and_then(LatencySummary::from_samples),
    })
}

/// Which predictor the evaluation describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Read the replay outputs written by [`cmd_warn`].
    Replay,
    /// Replay the test split with constant-velocity forecasts.
    ConstantVelocity,
}

/// Evaluates a replay directory, or the constant-velocity baseline.
pub fn cmd_eval(cfg: &RunConfig, data_dir: &Path, run_dir: &Path, baseline: Baseline) -> Result<EvalReport> {
    let cfg = cfg.effective()?;
    let data = load_dataset(data_dir)?;
    match baseline {
        Baseline::Replay => {
            let events = read_event_log(&run_dir.join(EVENTS_FILE))?;
            let forecasts = read_forecasts(&run_dir.join(PREDICTIONS_FILE))?;
            let lp = run_dir.join(LATENCY_FILE);
            let latency: Option<LatencySummary> = match std::fs::read_to_string(&lp) {
                Ok(t) => serde_json::from_str(&t).map_err(|e| Error::Format {
                    kind: "latency",
                    location: lp.display().to_string(),
                    detail: e.to_string(),
                })?,
                Err(_) => None,
            };
            let mut r = evaluate("hstan", &data, &events, &forecasts, None)?;
            r.latency = latency;
            Ok(r)
        }
        Baseline::ConstantVelocity => {
            let predictor = Predictor::ConstantVelocity { steps: cfg.model.pred_steps };
            let episodes: Vec<&Episode> = data.episodes(Split::Test).collect();
            let out = replay_all(&predictor, &episodes, &cfg.risk, cfg.model.obs_steps, true)?;
            evaluate("cv", &data, &out.events, &out.forecasts, Some(&out.latencies_ms))
        }
    }
}

/// Reports for the full model and each switch, in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub reports: Vec<EvalReport>,
}

/// Whether `path` holds a checkpoint that already completed training under `cfg`.
fn is_finished(path: &Path, cfg: &RunConfig) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let eff = cfg.effective()?;
    let s = TrainState::load(path)?;
    Ok(s.model.config == eff.model && s.seed == eff.seed && s.epochs_done() == eff.train.epochs)
}

/// Runs train → calibrate → warn → eval for the full configuration and once
/// per switch, reusing the full model for switches that leave training
/// unchanged and any checkpoint in `out_dir` that already finished training.
pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, switches: &[Ablation], mut log: impl FnMut(&str)) -> Result<AblationRun> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let base = RunConfig {
        ablations: Vec::new(),
        ..cfg.clone()
    };
    let mut runs: Vec<(String, RunConfig)> = vec![("full".into(), base.clone())];
    for s in switches {
        runs.push((
            s.to_string(),
            RunConfig {
                ablations: vec![*s],
                ..base.clone()
            },
        ));
    }
    let full_ckpt = out_dir.join("full").join("model.ckpt");
    let mut reports = Vec::new();
    for (name, rc) in runs {
        let dir = out_dir.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let retrain = name == "full" || rc.ablations.iter().any(|a| a.affects_training());
        let ckpt = if retrain {
            let p = dir.join("model.ckpt");
            if is_finished(&p, &rc)? {
                log(&format!("{name}: reusing {}", p.display()));
            } else {
                log(&format!("{name}: training"));
                cmd_train(&rc, data_dir, &p, None, |_| {})?;
            }
            p
        } else {
            full_ckpt.clone()
        };
        let cal = dir.join("calibration.json");
        cmd_calibrate(&rc, &ckpt, data_dir, &cal)?;
        cmd_warn(&rc, &ckpt, Some(&cal), data_dir, &dir)?;
        let mut r = cmd_eval(&rc, data_dir, &dir, Baseline::Replay)?;
        r.name = name.clone();
        std::fs::write(dir.join("report.txt"), r.to_text()).map_err(|e| Error::io(&dir, e))?;
        log(&format!("{name}: ADE {:.4} F1 {:.3}", r.ade, r.f1()));
        reports.push(r);
    }
    Ok(AblationRun { reports })
}
