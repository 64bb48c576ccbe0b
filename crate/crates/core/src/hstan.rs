//! The end-to-end trajectory predictor: per-frame graph attention, a GRU
//! stack with temporal self-attention, an MLP decoder for point forecasts and
//! two quantile heads of the same topology.
//!
//! Inputs are standardised features with positions taken relative to the
//! centroid of the first observed frame. Decoders emit normalised
//! displacements from each vehicle's last observed position; the fitted
//! target statistics map them back to metres.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, cosine_lr, glorot, Activation, Bindings, LrSchedule, OptimizerState, ParameterStore, Tape,
    TensorContainer, Tensor2D, Var,
};
use crate::scene_graph::{build_adjacency, embed_frame, GatStack, SceneFrame, FEATURE_DIM};
use crate::temporal::{collapse_to_context, gru_encode, multi_head_self_attention, same_vehicle_mask, GruParams, MhaParams};

/// Architecture, horizon and loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HstanConfig {
    /// Input channels per vehicle (C).
    pub features: usize,
    /// Graph attention width (D_h).
    pub sam_dim: usize,
    /// Graph attention heads per layer (K).
    pub sam_heads: usize,
    /// Graph attention layers (L_s).
    pub sam_layers: usize,
    /// Neighborhood radius R_d in metres.
    pub radius: f64,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    /// Temporal self-attention heads (M).
    pub tam_heads: usize,
    /// Observed frames (T).
    pub obs_steps: usize,
    /// Predicted frames (T′).
    pub pred_steps: usize,
    /// Frame period in seconds.
    pub dt: f64,
    pub decoder_hidden: Vec<usize>,
    /// Miscoverage level of the quantile heads.
    pub alpha: f64,
    pub pinball_weight: f64,
    pub collision_weight: f64,
    /// Predicted centre distance below which the collision penalty applies.
    pub collision_radius: f64,
    /// Graph attention enabled; when off, the embedding passes straight through.
    pub use_sam: bool,
    /// GRU and temporal attention enabled; when off, the bridged last frame is the context.
    pub use_tam: bool,
}

impl Default for HstanConfig {
    fn default() -> Self {
        Self {
            features: FEATURE_DIM,
            sam_dim: 256,
            sam_heads: 8,
            sam_layers: 3,
            radius: 30.0,
            gru_hidden: 512,
            gru_layers: 2,
            tam_heads: 4,
            obs_steps: 8,
            pred_steps: 12,
            dt: 0.1,
            decoder_hidden: vec![512, 256],
            alpha: 0.1,
            pinball_weight: 0.5,
            collision_weight: 0.1,
            collision_radius: 4.0,
            use_sam: true,
            use_tam: true,
        }
    }
}

impl HstanConfig {
    /// Small widths that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            sam_dim: 16,
            sam_heads: 2,
            gru_hidden: 32,
            tam_heads: 2,
            decoder_hidden: vec![64, 32],
            ..Self::default()
        }
    }

    /// Sets both attention head counts to one.
    pub fn single_head(mut self) -> Self {
        self.sam_heads = 1;
        self.tam_heads = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.features != FEATURE_DIM {
            return bad(format!("features must be {FEATURE_DIM}, got {}", self.features));
        }
        if self.obs_steps == 0 || self.pred_steps == 0 {
            return bad("observation and prediction horizons must be ≥ 1".into());
        }
        if !(self.dt > 0.0) || !(self.radius > 0.0) {
            return bad("frame period and radius must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.sam_heads == 0 || self.sam_dim % self.sam_heads != 0 {
            return bad(format!("sam_dim {} not divisible by {} heads", self.sam_dim, self.sam_heads));
        }
        if self.tam_heads == 0 || self.gru_hidden % self.tam_heads != 0 {
            return bad(format!(
                "gru_hidden {} not divisible by {} heads",
                self.gru_hidden, self.tam_heads
            ));
        }
        if self.sam_layers == 0 || self.gru_layers == 0 || self.decoder_hidden.contains(&0) {
            return bad("layer counts and widths must be ≥ 1".into());
        }
        if self.pinball_weight < 0.0 || self.collision_weight < 0.0 || self.collision_radius < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.pred_steps
    }
}

/// One training or evaluation sample: `T` observed frames with a fixed
/// roster and the true future positions (`N × 2T′`, columns `x₁ y₁ x₂ y₂ …`).
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub episode_id: u64,
    /// Index of the first observed frame within the episode.
    pub start: usize,
    pub history: Vec<SceneFrame>,
    pub future: Tensor2D,
}

impl Window {
    pub fn last_positions(&self) -> Vec<[f64; 2]> {
        self.history
            .last()
            .map(|f| f.vehicles.iter().map(|v| v.position()).collect())
            .unwrap_or_default()
    }

    /// True future as displacements from the last observed positions.
    pub fn future_displacements(&self) -> Tensor2D {
        let last = self.last_positions();
        let mut d = self.future.clone();
        for (i, p) in last.iter().enumerate() {
            for (c, v) in d.row_mut(i).iter_mut().enumerate() {
                *v -= p[c % 2];
            }
        }
        d
    }
}

/// Standardisation statistics for inputs and targets, fitted on training
/// windows and stored with the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub feat_mean: Tensor2D,
    pub feat_std: Tensor2D,
    pub target_mean: Tensor2D,
    pub target_std: Tensor2D,
}

const FEATURE_STD_FLOOR: f64 = 1e-6;
const TARGET_STD_FLOOR: f64 = 0.01;

impl Normalizer {
    pub fn identity(features: usize, outputs: usize) -> Self {
        Self {
            feat_mean: Tensor2D::zeros(1, features),
            feat_std: Tensor2D::filled(1, features, 1.0),
            target_mean: Tensor2D::zeros(1, outputs),
            target_std: Tensor2D::filled(1, outputs, 1.0),
        }
    }

    pub fn fit(windows: &[Window], outputs: usize) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Empty("training window set"));
        }
        let mut feats = Vec::new();
        let mut targets = Vec::new();
        for w in windows {
            let origin = w.history[0].centroid();
            for f in &w.history {
                feats.push(f.features(origin));
            }
            let d = w.future_displacements();
            if d.cols() != outputs {
                return Err(Error::Shape {
                    op: "normalizer target",
                    left: d.shape(),
                    right: (d.rows(), outputs),
                });
            }
            targets.push(d);
        }
        let (fm, fs) = column_stats(&feats, FEATURE_STD_FLOOR, 1.0);
        let (tm, ts) = column_stats(&targets, TARGET_STD_FLOOR, TARGET_STD_FLOOR);
        Ok(Self {
            feat_mean: fm,
            feat_std: fs,
            target_mean: tm,
            target_std: ts,
        })
    }

    fn normalize(&self, x: &Tensor2D) -> Tensor2D {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.feat_mean.get(0, c)) / self.feat_std.get(0, c);
            }
        }
        out
    }

    fn entries(&self) -> [(&'static str, &Tensor2D); 4] {
        [
            ("norm/feat_mean", &self.feat_mean),
            ("norm/feat_std", &self.feat_std),
            ("norm/target_mean", &self.target_mean),
            ("norm/target_std", &self.target_std),
        ]
    }
}

/// Column mean and population standard deviation over stacked matrices;
/// deviations below `floor` are replaced by `fallback`.
fn column_stats(parts: &[Tensor2D], floor: f64, fallback: f64) -> (Tensor2D, Tensor2D) {
    let cols = parts[0].cols();
    let mut sum = vec![0.0; cols];
    let mut count = 0usize;
    for p in parts {
        for r in 0..p.rows() {
            for (s, v) in sum.iter_mut().zip(p.row(r)) {
                *s += v;
            }
        }
        count += p.rows();
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut sq = vec![0.0; cols];
    for p in parts {
        for r in 0..p.rows() {
            for ((s, v), m) in sq.iter_mut().zip(p.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std: Vec<f64> = sq
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd >= floor {
                sd
            } else {
                fallback
            }
        })
        .collect();
    (Tensor2D::row_vector(&mean), Tensor2D::row_vector(&std))
}

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<(String, String)>,
}

impl Mlp {
    pub fn init(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, dims: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let w = format!("{prefix}/layer{l}/w");
            let b = format!("{prefix}/layer{l}/b");
            store.insert(&w, glorot(rng, pair[0], pair[1]))?;
            store.insert(&b, Tensor2D::zeros(1, pair[1]))?;
            layers.push((w, b));
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, b: &Bindings) -> Result<Var> {
        let mut h = x;
        for (l, (w, bias)) in self.layers.iter().enumerate() {
            h = tape.linear(h, b.var(w)?, Some(b.var(bias)?))?;
            if l + 1 < self.layers.len() {
                h = tape.activation(h, Activation::Relu);
            }
        }
        Ok(h)
    }

    /// Path of the output-layer bias.
    pub fn output_bias(&self) -> &str {
        &self.layers.last().expect("at least one layer").1
    }
}

const EMBED_W: &str = "sam/embed/w";
const EMBED_B: &str = "sam/embed/b";
const BRIDGE_W: &str = "bridge/w";
const BRIDGE_B: &str = "bridge/b";

/// Parameters and layer layout of a configured model.
#[derive(Clone, Debug, PartialEq)]
pub struct HstanModel {
    pub config: HstanConfig,
    pub params: ParameterStore,
    pub norm: Normalizer,
    gat: GatStack,
    gru: GruParams,
    mha: MhaParams,
    pub point_head: Mlp,
    pub lower_head: Mlp,
    pub upper_head: Mlp,
}

impl HstanModel {
    /// Fresh Glorot-initialised model with identity normalisation.
    pub fn new(config: HstanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        let c = &config;
        p.insert(EMBED_W, glorot(&mut rng, c.features, c.sam_dim))?;
        p.insert(EMBED_B, Tensor2D::zeros(1, c.sam_dim))?;
        let gat = GatStack::init(&mut p, &mut rng, "sam", c.sam_dim, c.sam_layers, c.sam_heads)?;
        p.insert(BRIDGE_W, glorot(&mut rng, c.sam_dim, c.gru_hidden))?;
        p.insert(BRIDGE_B, Tensor2D::zeros(1, c.gru_hidden))?;
        let gru = GruParams::init(&mut p, &mut rng, "tam/gru", c.gru_hidden, c.gru_hidden, c.gru_layers)?;
        let mha = MhaParams::init(&mut p, &mut rng, "tam/attn", c.gru_hidden, c.tam_heads)?;
        let mut dims = vec![c.gru_hidden];
        dims.extend(&c.decoder_hidden);
        dims.push(c.output_dim());
        let point_head = Mlp::init(&mut p, &mut rng, "decoder/point", &dims)?;
        let lower_head = Mlp::init(&mut p, &mut rng, "decoder/lower", &dims)?;
        let upper_head = Mlp::init(&mut p, &mut rng, "decoder/upper", &dims)?;
        let norm = Normalizer::identity(c.features, c.output_dim());
        Ok(Self {
            config,
            params: p,
            norm,
            gat,
            gru,
            mha,
            point_head,
            lower_head,
            upper_head,
        })
    }

    /// Rebuilds the layout for `config` and installs `params`, which must
    /// cover exactly the expected paths and shapes.
    pub fn from_parts(config: HstanConfig, params: ParameterStore, norm: Normalizer) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected: Vec<(String, (usize, usize))> =
            model.params.iter().map(|(k, v)| (k.to_string(), v.shape())).collect();
        let got: Vec<(String, (usize, usize))> = params.iter().map(|(k, v)| (k.to_string(), v.shape())).collect();
        if expected != got {
            return Err(Error::Config(
                "checkpoint parameters do not match the model configuration".into(),
            ));
        }
        let outputs = model.config.output_dim();
        if norm.feat_mean.shape() != (1, model.config.features) || norm.target_mean.shape() != (1, outputs) {
            return Err(Error::Config("normalizer shapes do not match the model configuration".into()));
        }
        model.params = params;
        model.norm = norm;
        Ok(model)
    }
}

/// Point and interval forecasts in absolute scene coordinates, each
/// `N × 2T′` with columns `x₁ y₁ x₂ y₂ …`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    pub ids: Vec<u32>,
    pub steps: usize,
    pub point: Tensor2D,
    pub lower: Tensor2D,
    pub upper: Tensor2D,
    pub calibrated: bool,
}

impl PredictionBatch {
    pub fn vehicles(&self) -> usize {
        self.point.rows()
    }

    /// Point position of vehicle `i` at horizon step `k` (0-based).
    pub fn position(&self, i: usize, k: usize) -> [f64; 2] {
        [self.point.get(i, 2 * k), self.point.get(i, 2 * k + 1)]
    }

    pub fn lower_at(&self, i: usize, k: usize) -> [f64; 2] {
        [self.lower.get(i, 2 * k), self.lower.get(i, 2 * k + 1)]
    }

    pub fn upper_at(&self, i: usize, k: usize) -> [f64; 2] {
        [self.upper.get(i, 2 * k), self.upper.get(i, 2 * k + 1)]
    }
}

/// Handles recorded by one forward pass. Trajectories are displacements in
/// metres from `last`.
pub struct ForwardVars {
    pub context: Var,
    pub point: Var,
    pub lower: Var,
    pub upper: Var,
    /// Last observed positions tiled to `N × 2T′`.
    pub last: Tensor2D,
}

fn check_roster(history: &[SceneFrame]) -> Result<()> {
    let ids: Vec<u32> = history[0].vehicles.iter().map(|v| v.id).collect();
    for (t, f) in history.iter().enumerate() {
        f.validate()?;
        if f.vehicles.len() != ids.len() || f.vehicles.iter().zip(&ids).any(|(v, id)| v.id != *id) {
            return Err(Error::RosterMismatch { frame: t });
        }
    }
    Ok(())
}

fn tiled_last(history: &[SceneFrame], steps: usize) -> Tensor2D {
    let last = history.last().expect("non-empty history");
    let mut t = Tensor2D::zeros(last.len(), 2 * steps);
    for (i, v) in last.vehicles.iter().enumerate() {
        for k in 0..steps {
            t.set(i, 2 * k, v.x);
            t.set(i, 2 * k + 1, v.y);
        }
    }
    t
}

/// Decoder output mapped from normalised units to metres.
fn denormalize(tape: &mut Tape, z: Var, norm: &Normalizer) -> Result<Var> {
    let std = tape.leaf(norm.target_std.clone());
    let mean = tape.leaf(norm.target_mean.clone());
    let scaled = tape.mul_row(z, std)?;
    tape.add_row(scaled, mean)
}

/// Records the full model on `tape`: per-frame embedding and graph attention,
/// bridge, GRU, temporal attention, context collapse and the three decoders.
pub fn forward_on_tape(model: &HstanModel, tape: &mut Tape, b: &Bindings, history: &[SceneFrame]) -> Result<ForwardVars> {
    let c = &model.config;
    if history.len() != c.obs_steps {
        return Err(Error::Config(format!(
            "history has {} frames, model expects {}",
            history.len(),
            c.obs_steps
        )));
    }
    check_roster(history)?;
    let n = history[0].len();
    let origin = history[0].centroid();
    let (we, be) = (b.var(EMBED_W)?, b.var(EMBED_B)?);
    let (wb, bb) = (b.var(BRIDGE_W)?, b.var(BRIDGE_B)?);

    let mut bridged = Vec::with_capacity(history.len());
    for frame in history {
        let x = tape.leaf(model.norm.normalize(&frame.features(origin)));
        let mut h = embed_frame(tape, x, we, be)?;
        if c.use_sam {
            let graph = Arc::new(build_adjacency(frame, c.radius)?.neighbor_lists());
            h = model.gat.forward(tape, h, &graph, b)?;
        }
        bridged.push(tape.linear(h, wb, Some(bb))?);
    }

    let context = if c.use_tam {
        let hs = gru_encode(tape, &bridged, &model.gru, b)?;
        let stacked = tape.concat_rows(&hs)?;
        let mask = same_vehicle_mask(n, history.len());
        let att = multi_head_self_attention(tape, stacked, &model.mha, Some(&mask), b)?;
        collapse_to_context(tape, att, n)?
    } else {
        *bridged.last().expect("non-empty history")
    };

    let mut heads = [context; 3];
    for (slot, mlp) in heads
        .iter_mut()
        .zip([&model.point_head, &model.lower_head, &model.upper_head])
    {
        let z = mlp.forward(tape, context, b)?;
        *slot = denormalize(tape, z, &model.norm)?;
    }
    Ok(ForwardVars {
        context,
        point: heads[0],
        lower: heads[1],
        upper: heads[2],
        last: tiled_last(history, c.pred_steps),
    })
}

/// Context features `H^F` (`N × gru_hidden`) and the uncalibrated forecast.
pub fn hstan_forward(model: &HstanModel, history: &[SceneFrame]) -> Result<(Tensor2D, PredictionBatch)> {
    let mut tape = Tape::new();
    let b = tape.bind(&model.params);
    let f = forward_on_tape(model, &mut tape, &b, history)?;
    let abs = |v: Var| {
        let mut t = tape.value(v).clone();
        t.add_assign(&f.last);
        t
    };
    let batch = PredictionBatch {
        ids: history[0].vehicles.iter().map(|v| v.id).collect(),
        steps: model.config.pred_steps,
        point: abs(f.point),
        lower: abs(f.lower),
        upper: abs(f.upper),
        calibrated: false,
    };
    let ctx = tape.value(f.context).clone();
    if !(ctx.is_finite() && batch.point.is_finite() && batch.lower.is_finite() && batch.upper.is_finite()) {
        return Err(Error::NonFinite("model forward pass".into()));
    }
    Ok((ctx, batch))
}

fn decode_with(model: &HstanModel, mlp: &Mlp, context: &Tensor2D, last: &[[f64; 2]]) -> Result<Tensor2D> {
    if context.rows() != last.len() || context.cols() != model.config.gru_hidden {
        return Err(Error::Shape {
            op: "decode_trajectories",
            left: context.shape(),
            right: (last.len(), model.config.gru_hidden),
        });
    }
    let mut tape = Tape::new();
    let b = tape.bind(&model.params);
    let x = tape.leaf(context.clone());
    let z = mlp.forward(&mut tape, x, &b)?;
    let d = denormalize(&mut tape, z, &model.norm)?;
    let mut out = tape.value(d).clone();
    for (i, p) in last.iter().enumerate() {
        for (c, v) in out.row_mut(i).iter_mut().enumerate() {
            *v += p[c % 2];
        }
    }
    Ok(out)
}

/// Point trajectories (`N × 2T′`, absolute) decoded from context rows.
pub fn decode_trajectories(model: &HstanModel, context: &Tensor2D, last: &[[f64; 2]]) -> Result<Tensor2D> {
    decode_with(model, &model.point_head, context, last)
}

/// Raw lower and upper quantile trajectories (absolute, no ordering
/// guarantee).
pub fn quantile_forward(model: &HstanModel, context: &Tensor2D, last: &[[f64; 2]]) -> Result<(Tensor2D, Tensor2D)> {
    Ok((
        decode_with(model, &model.lower_head, context, last)?,
        decode_with(model, &model.upper_head, context, last)?,
    ))
}

/// Loss terms of one window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub pinball: f64,
    pub collision: f64,
}

/// Handles of the recorded loss terms.
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub pinball: Var,
    pub collision: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.value(self.total).item(),
            mse: tape.value(self.mse).item(),
            pinball: tape.value(self.pinball).item(),
            collision: tape.value(self.collision).item(),
        }
    }
}

/// Mean pinball loss `q·max(u,0) + (1−q)·max(−u,0)` with `u = y − pred`.
fn pinball_on_tape(tape: &mut Tape, pred: Var, truth: Var, q: f64) -> Result<Var> {
    let u = tape.sub(truth, pred)?;
    let pos = tape.activation(u, Activation::Relu);
    let neg_u = tape.scale(u, -1.0);
    let neg = tape.activation(neg_u, Activation::Relu);
    let a = tape.scale(pos, q);
    let bq = tape.scale(neg, 1.0 - q);
    let s = tape.add(a, bq)?;
    Ok(tape.mean(s))
}

const DISTANCE_EPS: f64 = 1e-12;

/// Mean over vehicle pairs and horizon steps of `max(0, r − ‖p_i − p_j‖)²`.
fn collision_on_tape(tape: &mut Tape, abs_point: Var, radius: f64) -> Result<Var> {
    let (n, cols) = tape.value(abs_point).shape();
    let steps = cols / 2;
    let pairs = n * n.saturating_sub(1) / 2;
    if pairs == 0 {
        return Ok(tape.leaf(Tensor2D::scalar(0.0)));
    }
    let mut diff = Tensor2D::zeros(pairs, n);
    let mut row = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            diff.set(row, i, 1.0);
            diff.set(row, j, -1.0);
            row += 1;
        }
    }
    let mut step_sum = Tensor2D::zeros(cols, steps);
    for k in 0..steps {
        step_sum.set(2 * k, k, 1.0);
        step_sum.set(2 * k + 1, k, 1.0);
    }
    let dv = tape.leaf(diff);
    let sv = tape.leaf(step_sum);
    let d = tape.matmul(dv, abs_point)?;
    let sq = tape.square(d);
    let dist2 = tape.matmul(sq, sv)?;
    let dist2 = tape.add_scalar(dist2, DISTANCE_EPS);
    let dist = tape.sqrt(dist2);
    let gap = tape.scale(dist, -1.0);
    let gap = tape.add_scalar(gap, radius);
    let hinge = tape.activation(gap, Activation::Relu);
    let sq = tape.square(hinge);
    Ok(tape.mean(sq))
}

/// `MSE + w_p·(pinball_{α/2}(lower) + pinball_{1−α/2}(upper)) + w_c·collision`
/// on displacement handles; `truth` is in displacement form as well.
pub fn loss_on_tape(tape: &mut Tape, f: &ForwardVars, truth: &Tensor2D, config: &HstanConfig) -> Result<LossVars> {
    let pv = tape.value(f.point).shape();
    if truth.shape() != pv {
        return Err(Error::Shape {
            op: "training_loss",
            left: pv,
            right: truth.shape(),
        });
    }
    let y = tape.leaf(truth.clone());
    let err = tape.sub(f.point, y)?;
    let sq = tape.square(err);
    let mse = tape.mean(sq);
    let lo = pinball_on_tape(tape, f.lower, y, config.alpha / 2.0)?;
    let hi = pinball_on_tape(tape, f.upper, y, 1.0 - config.alpha / 2.0)?;
    let pinball = tape.add(lo, hi)?;
    let last = tape.leaf(f.last.clone());
    let abs_point = tape.add(f.point, last)?;
    let collision = collision_on_tape(tape, abs_point, config.collision_radius)?;
    let wp = tape.scale(pinball, config.pinball_weight);
    let wc = tape.scale(collision, config.collision_weight);
    let total = tape.add(mse, wp)?;
    let total = tape.add(total, wc)?;
    Ok(LossVars {
        total,
        mse,
        pinball,
        collision,
    })
}

/// Training objective for an uncalibrated forecast against absolute truth.
pub fn training_loss(pred: &PredictionBatch, truth: &Tensor2D, config: &HstanConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let zero = Tensor2D::zeros(pred.point.rows(), pred.point.cols());
    let f = ForwardVars {
        context: tape.leaf(Tensor2D::scalar(0.0)),
        point: tape.leaf(pred.point.clone()),
        lower: tape.leaf(pred.lower.clone()),
        upper: tape.leaf(pred.upper.clone()),
        last: zero,
    };
    let l = loss_on_tape(&mut tape, &f, truth, config)?;
    Ok(l.values(&tape))
}

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            min_lr: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            min: self.min_lr,
            total_epochs: self.epochs,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub pinball: f64,
    pub collision: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: HstanModel,
    pub optimizer: OptimizerState,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    config: HstanConfig,
    seed: u64,
    adam_step: u64,
    history: Vec<EpochRecord>,
}

const CHECKPOINT_FORMAT: &str = "fcw-hstan-checkpoint";

impl TrainState {
    /// New model for `config`, with normalisation fitted on `windows`.
    pub fn new(config: HstanConfig, windows: &[Window], seed: u64) -> Result<Self> {
        let mut model = HstanModel::new(config, seed)?;
        model.norm = Normalizer::fit(windows, model.config.output_dim())?;
        Ok(Self {
            model,
            optimizer: OptimizerState::new(),
            seed,
            history: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// One pass over `windows` in a seed- and epoch-determined order.
    pub fn run_epoch(&mut self, windows: &[Window], tc: &TrainConfig) -> Result<EpochRecord> {
        if windows.is_empty() {
            return Err(Error::Empty("training window set"));
        }
        if tc.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        let epoch = self.history.len();
        let lr = cosine_lr(epoch, &tc.schedule())?;
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut per_window = vec![LossBreakdown::default(); windows.len()];
        for batch in order.chunks(tc.batch_size) {
            self.model.params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &wi in batch {
                let w = &windows[wi];
                let mut tape = Tape::new();
                let b = tape.bind(&self.model.params);
                let f = forward_on_tape(&self.model, &mut tape, &b, &w.history)?;
                let l = loss_on_tape(&mut tape, &f, &w.future_displacements(), &self.model.config)?;
                let v = l.values(&tape);
                if !v.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, episode {} window start {} (mse {}, pinball {}, collision {})",
                        w.episode_id, w.start, v.mse, v.pinball, v.collision
                    )));
                }
                per_window[wi] = v;
                let g = tape.backward(l.total)?;
                self.model.params.accumulate(&b, &g, scale);
            }
            adam_step(&mut self.model.params, &mut self.optimizer, lr);
        }
        if !self.model.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let n = windows.len() as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| per_window.iter().map(f).sum::<f64>() / n;
        let rec = EpochRecord {
            epoch,
            lr,
            loss: mean(|l| l.total),
            mse: mean(|l| l.mse),
            pinball: mean(|l| l.pinball),
            collision: mean(|l| l.collision),
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Runs epochs until `tc.epochs` have completed, calling `log` after each.
    pub fn train_until(
        &mut self,
        windows: &[Window],
        tc: &TrainConfig,
        mut log: impl FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while self.history.len() < tc.epochs {
            let rec = self.run_epoch(windows, tc)?;
            log(&rec)?;
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            config: self.model.config.clone(),
            seed: self.seed,
            adam_step: self.optimizer.step,
            history: self.history.clone(),
        };
        let metadata = serde_json::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (k, v) in self.model.params.iter() {
            entries.insert(format!("param/{k}"), v.clone());
        }
        for (k, m, v) in self.optimizer.moments() {
            entries.insert(format!("adam_m/{k}"), m.clone());
            entries.insert(format!("adam_v/{k}"), v.clone());
        }
        for (k, v) in self.model.norm.entries() {
            entries.insert(k.to_string(), v.clone());
        }
        Ok(TensorContainer { metadata, entries })
    }

    pub fn from_container(c: TensorContainer) -> Result<Self> {
        let fail = |detail: String| Error::Format {
            kind: "checkpoint",
            location: "metadata".into(),
            detail,
        };
        let meta: CheckpointMeta = serde_json::from_str(&c.metadata).map_err(|e| fail(e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(fail(format!("unexpected format tag `{}`", meta.format)));
        }
        let mut params = ParameterStore::new();
        let mut optimizer = OptimizerState::new();
        optimizer.step = meta.adam_step;
        let mut norm = BTreeMap::new();
        let mut moments: BTreeMap<String, (Option<Tensor2D>, Option<Tensor2D>)> = BTreeMap::new();
        for (k, v) in c.entries {
            if let Some(p) = k.strip_prefix("param/") {
                params.insert(p, v)?;
            } else if let Some(p) = k.strip_prefix("adam_m/") {
                moments.entry(p.to_string()).or_default().0 = Some(v);
            } else if let Some(p) = k.strip_prefix("adam_v/") {
                moments.entry(p.to_string()).or_default().1 = Some(v);
            } else if k.starts_with("norm/") {
                norm.insert(k, v);
            } else {
                return Err(fail(format!("unknown entry `{k}`")));
            }
        }
        for (p, (m, v)) in moments {
            match (m, v) {
                (Some(m), Some(v)) => optimizer.restore_moment(&p, m, v),
                _ => return Err(fail(format!("incomplete optimizer moments for `{p}`"))),
            }
        }
        let mut take = |k: &str| norm.remove(k).ok_or_else(|| fail(format!("missing `{k}`")));
        let normalizer = Normalizer {
            feat_mean: take("norm/feat_mean")?,
            feat_std: take("norm/feat_std")?,
            target_mean: take("norm/target_mean")?,
            target_std: take("norm/target_std")?,
        };
        let model = HstanModel::from_parts(meta.config, params, normalizer)?;
        Ok(Self {
            model,
            optimizer,
            seed: meta.seed,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_container()?.to_bytes();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_container(TensorContainer::from_bytes(&bytes)?)
    }
}

/// Trains a fresh model on `windows` for `tc.epochs` epochs.
pub fn train(windows: &[Window], config: &HstanConfig, tc: &TrainConfig, seed: u64) -> Result<TrainState> {
    let mut state = TrainState::new(config.clone(), windows, seed)?;
    state.train_until(windows, tc, |_| Ok(()))?;
    Ok(state)
}

/// Point forecasts for many windows; order of `windows` is preserved.
pub fn predict_all(model: &HstanModel, windows: &[Window]) -> Result<Vec<PredictionBatch>> {
    use rayon::prelude::*;
    windows
        .par_iter()
        .map(|w| hstan_forward(model, &w.history).map(|(_, p)| p))
        .collect()
}

#[cfg(test)]
mod tests;
