//! Synthetic traffic episodes, windowed datasets and the constant-velocity
//! baseline.
//!
//! Vehicles move along lane paths with piecewise-constant longitudinal
//! acceleration, so positions between steps are exact quadratics. The ego
//! vehicle always has id 0.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hstan::Window;
use crate::numerics::Tensor2D;
use crate::scene_graph::{SceneFrame, VehicleObservation};

/// Centre distance below which two vehicles are in contact.
pub const CONTACT_THRESHOLD: f64 = 2.0;
pub const LANE_WIDTH: f64 = 3.5;
const VEHICLE_LENGTH: f64 = 4.5;
const VEHICLE_WIDTH: f64 = 1.8;
/// Frames kept after the first contact.
const POST_CONTACT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    HighwayMerging,
    UrbanIntersection,
    SuddenBraking,
    CutIn,
    CongestedTraffic,
    CurvedRoad,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::HighwayMerging,
        Family::UrbanIntersection,
        Family::SuddenBraking,
        Family::CutIn,
        Family::CongestedTraffic,
        Family::CurvedRoad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::HighwayMerging => "highway_merging",
            Family::UrbanIntersection => "urban_intersection",
            Family::SuddenBraking => "sudden_braking",
            Family::CutIn => "cut_in",
            Family::CongestedTraffic => "congested_traffic",
            Family::CurvedRoad => "curved_road",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario family `{s}`")))
    }
}

/// Generation request for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub family: Family,
    pub vehicles: usize,
    /// Episode length in seconds; the episode has `duration / dt` frames.
    pub duration: f64,
    pub dt: f64,
    /// Standard deviation of the additive position noise (m).
    pub noise: f64,
    /// Road curvature for `curved_road`; `None` samples one.
    pub kappa: Option<f64>,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(family: Family, seed: u64) -> Self {
        Self {
            family,
            vehicles: 4,
            duration: 8.0,
            dt: 0.1,
            noise: 0.05,
            kappa: None,
            seed,
        }
    }

    pub fn frames(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.duration > 0.0) {
            return Err(Error::Config("duration and dt must be positive".into()));
        }
        let ratio = self.duration / self.dt;
        if (ratio - ratio.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "duration {} is not a multiple of dt {}",
                self.duration, self.dt
            )));
        }
        if self.frames() < 3 {
            return Err(Error::Config("an episode needs at least 3 frames".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be ≥ 0".into()));
        }
        let min = if self.family == Family::CutIn || self.family == Family::HighwayMerging || self.family == Family::UrbanIntersection {
            2
        } else {
            1
        };
        if self.vehicles < min {
            return Err(Error::Config(format!("{} needs at least {min} vehicles", self.family)));
        }
        Ok(())
    }
}

/// Intelligent Driver Model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed v₀ (m/s).
    pub desired_speed: f64,
    /// Maximum acceleration a (m/s²).
    pub accel: f64,
    /// Comfortable deceleration b (m/s²).
    pub comfort_decel: f64,
    /// Jam distance s₀ (m).
    pub min_gap: f64,
    /// Time headway T (s).
    pub headway: f64,
    pub delta: f64,
    /// Braking is clamped at `−max_brake`.
    pub max_brake: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 20.0,
            accel: 1.5,
            comfort_decel: 2.0,
            min_gap: 2.0,
            headway: 1.5,
            delta: 4.0,
            max_brake: 9.0,
        }
    }
}

impl IdmParams {
    pub fn with_speed(self, desired_speed: f64) -> Self {
        Self { desired_speed, ..self }
    }

    /// Free-road term plus the interaction term for a leader at bumper gap
    /// `gap` driving at `v_leader`.
    pub fn acceleration(&self, v: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / self.desired_speed.max(1e-6)).powf(self.delta);
        let interaction = match leader {
            Some((gap, v_leader)) => {
                let dv = v - v_leader;
                let s_star = self.min_gap + (v * self.headway + v * dv / (2.0 * (self.accel * self.comfort_decel).sqrt())).max(0.0);
                (s_star / gap.max(0.01)).powi(2)
            }
            None => 0.0,
        };
        (self.accel * (free - interaction)).max(-self.max_brake)
    }
}

/// Planar state of one vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: [f64; 2],
    pub speed: f64,
    /// Heading angle (rad).
    pub heading: f64,
    pub acceleration: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    fn direction(&self) -> [f64; 2] {
        [self.heading.cos(), self.heading.sin()]
    }
}

/// Advances `(s, v)` by `dt` under constant acceleration `a`, stopping at
/// zero speed instead of reversing.
fn advance(s: f64, v: f64, a: f64, dt: f64) -> (f64, f64) {
    if a < 0.0 && v + a * dt < 0.0 {
        let tau = -v / a;
        (s + v * tau + 0.5 * a * tau * tau, 0.0)
    } else {
        (s + v * dt + 0.5 * a * dt * dt, v + a * dt)
    }
}

/// One IDM update of `follower` behind `leader`, integrated along the
/// follower's heading.
pub fn idm_step(follower: &VehicleState, leader: &VehicleState, params: &IdmParams, dt: f64) -> VehicleState {
    let dir = follower.direction();
    let along = (leader.position[0] - follower.position[0]) * dir[0] + (leader.position[1] - follower.position[1]) * dir[1];
    let gap = along - 0.5 * (leader.length + follower.length);
    let a = params.acceleration(follower.speed, Some((gap, leader.speed)));
    let (s, v) = advance(0.0, follower.speed, a, dt);
    VehicleState {
        position: [follower.position[0] + s * dir[0], follower.position[1] + s * dir[1]],
        speed: v,
        acceleration: a,
        ..*follower
    }
}

/// Road centreline of constant curvature starting at the origin heading +x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Road {
    pub kappa: f64,
}

impl Road {
    /// Point at arc length `s` and lateral offset `l` (left positive).
    pub fn point(&self, s: f64, l: f64) -> [f64; 2] {
        if self.kappa == 0.0 {
            return [s, l];
        }
        let r = 1.0 / self.kappa;
        let phi = s * self.kappa;
        [(r - l) * phi.sin(), r - (r - l) * phi.cos()]
    }
}

/// Per-episode parameters drawn from the scenario seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// Ego cruise speed (m/s).
    pub speed: f64,
    /// Initial centre distance from the ego to the primary actor (m).
    pub gap: f64,
    /// Speed of the primary actor (m/s).
    pub actor_speed: f64,
    /// Time at which the characteristic event starts (s).
    pub event_time: f64,
    /// Delay between the event and the ego's reaction; `None` never reacts.
    pub reaction_delay: Option<f64>,
    /// Braking intensity of the primary actor (m/s², positive).
    pub decel: f64,
    /// Length of the braking pulse or lane change (s).
    pub event_duration: f64,
    pub kappa: f64,
}

impl Layout {
    pub fn sample(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Self {
        let reaction = Some(rng.gen_range(0.4..2.5));
        let event_time = rng.gen_range(1.5..3.5);
        match spec.family {
            Family::SuddenBraking => {
                let speed = rng.gen_range(15.0..25.0);
                Layout {
                    speed,
                    gap: rng.gen_range(18.0..40.0),
                    actor_speed: speed,
                    event_time,
                    reaction_delay: reaction,
                    decel: 6.0,
                    event_duration: rng.gen_range(1.5..3.5),
                    kappa: 0.0,
                }
            }
            Family::CutIn => {
                let speed = rng.gen_range(15.0..25.0);
                Layout {
                    speed,
                    gap: rng.gen_range(6.0..20.0),
                    actor_speed: speed - rng.gen_range(0.0..6.0),
                    event_time,
                    reaction_delay: reaction,
                    decel: rng.gen_range(0.0..4.0),
                    event_duration: rng.gen_range(1.5..3.0),
                    kappa: 0.0,
                }
            }
            Family::HighwayMerging => {
                let speed = rng.gen_range(18.0..26.0);
                Layout {
                    speed,
                    gap: rng.gen_range(4.0..20.0),
                    actor_speed: speed - rng.gen_range(3.0..9.0),
                    event_time,
                    reaction_delay: reaction,
                    decel: 0.0,
                    event_duration: rng.gen_range(2.0..3.5),
                    kappa: 0.0,
                }
            }
            Family::UrbanIntersection => {
                let speed = rng.gen_range(8.0..14.0);
                Layout {
                    speed,
                    // Ego arrival time at the conflict point minus the crossing
                    // vehicle's arrival time.
                    gap: rng.gen_range(-1.2..1.2),
                    actor_speed: rng.gen_range(7.0..12.0),
                    event_time,
                    reaction_delay: reaction,
                    decel: 0.0,
                    event_duration: rng.gen_range(2.5..4.0),
                    kappa: 0.0,
                }
            }
            Family::CongestedTraffic => {
                let speed = rng.gen_range(6.0..10.0);
                Layout {
                    speed,
                    gap: 0.0,
                    actor_speed: speed,
                    event_time: 0.0,
                    reaction_delay: Some(0.0),
                    decel: rng.gen_range(0.5..0.9) * speed,
                    event_duration: rng.gen_range(12.0..20.0),
                    kappa: 0.0,
                }
            }
            Family::CurvedRoad => {
                let radius = rng.gen_range(60.0..200.0);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let speed = rng.gen_range(12.0..20.0);
                Layout {
                    speed,
                    gap: rng.gen_range(15.0..35.0),
                    actor_speed: speed,
                    event_time,
                    reaction_delay: reaction,
                    decel: rng.gen_range(2.0..6.0),
                    event_duration: rng.gen_range(1.0..3.0),
                    kappa: spec.kappa.unwrap_or(sign / radius),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Lateral {
    Fixed(f64),
    Change { from: f64, to: f64, start: f64, duration: f64 },
}

impl Lateral {
    fn at(&self, t: f64) -> f64 {
        match *self {
            Lateral::Fixed(l) => l,
            Lateral::Change { from, to, start, duration } => {
                let u = ((t - start) / duration).clamp(0.0, 1.0);
                from + (to - from) * u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Control {
    Cruise,
    /// Constant deceleration over `[start, start + duration)`.
    Pulse { start: f64, duration: f64, decel: f64 },
    /// Speed profile `mean − amp·cos(2πt/period)`.
    Wave { amp: f64, period: f64 },
    /// Cruises until `from`, then follows IDM.
    Follow { from: Option<f64> },
    /// As `Follow`, also stopping before `stop_s` while `blocker` has not
    /// cleared the conflict zone.
    Yield { from: Option<f64>, stop_s: f64, blocker: usize },
}

#[derive(Clone, Copy, Debug)]
struct Agent {
    s: f64,
    v: f64,
    lateral: Lateral,
    /// x coordinate of a crossing road travelled in +y, if any.
    crossing: Option<f64>,
    control: Control,
    idm: IdmParams,
}

impl Agent {
    fn lane(s: f64, v: f64, l: f64, control: Control) -> Self {
        Self {
            s,
            v,
            lateral: Lateral::Fixed(l),
            crossing: None,
            control,
            idm: IdmParams::default().with_speed(v.max(1.0)),
        }
    }
}

fn active(from: Option<f64>, t: f64) -> bool {
    from.is_some_and(|f| t + 1e-9 >= f)
}

struct Sim {
    road: Road,
    agents: Vec<Agent>,
}

impl Sim {
    fn position(&self, i: usize, t: f64) -> [f64; 2] {
        let a = &self.agents[i];
        match a.crossing {
            Some(x) => [x, a.s],
            None => self.road.point(a.s, a.lateral.at(t)),
        }
    }

    /// Nearest lane vehicle ahead of `i` as `(bumper gap, speed)`.
    fn leader(&self, i: usize, t: f64) -> Option<(f64, f64)> {
        let me = &self.agents[i];
        let l = me.lateral.at(t);
        self.agents
            .iter()
            .enumerate()
            .filter(|(j, o)| *j != i && o.crossing.is_none() && o.s > me.s && (o.lateral.at(t) - l).abs() < 0.57 * LANE_WIDTH)
            .map(|(_, o)| (o.s - me.s - VEHICLE_LENGTH, o.v))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn accel(&self, i: usize, t: f64, dt: f64) -> f64 {
        let me = &self.agents[i];
        match me.control {
            Control::Cruise => 0.0,
            Control::Pulse { start, duration, decel } => {
                if t + 1e-9 >= start && t + 1e-9 < start + duration {
                    -decel
                } else {
                    0.0
                }
            }
            Control::Wave { amp, period } => {
                let w = std::f64::consts::TAU / period;
                amp * w * (w * (t + 0.5 * dt)).sin()
            }
            Control::Follow { from } => {
                if active(from, t) {
                    me.idm.acceleration(me.v, self.leader(i, t))
                } else {
                    0.0
                }
            }
            Control::Yield { from, stop_s, blocker } => {
                if !active(from, t) {
                    return 0.0;
                }
                let mut a = me.idm.acceleration(me.v, self.leader(i, t));
                let b = &self.agents[blocker];
                if b.s < 0.5 * LANE_WIDTH + VEHICLE_LENGTH && me.s < stop_s {
                    a = a.min(me.idm.acceleration(me.v, Some((stop_s - me.s, 0.0))));
                }
                a
            }
        }
    }

    fn step(&mut self, t: f64, dt: f64) {
        let acc: Vec<f64> = (0..self.agents.len()).map(|i| self.accel(i, t, dt)).collect();
        for (a, acc) in self.agents.iter_mut().zip(acc) {
            (a.s, a.v) = advance(a.s, a.v, acc, dt);
        }
    }
}

/// Episode-level ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub danger: bool,
    /// Time of the first frame with a pair closer than the contact threshold.
    pub contact_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub family: Family,
    pub dt: f64,
    /// Curvature of the road the ego drives on.
    pub kappa: f64,
    pub frames: Vec<SceneFrame>,
    pub label: Label,
}

impl Episode {
    pub fn window_count(&self, obs: usize, pred: usize) -> usize {
        (self.frames.len() + 1).saturating_sub(obs + pred)
    }

    /// Stride-1 windows of `obs` observed and `pred` future frames.
    pub fn windows(&self, obs: usize, pred: usize) -> Vec<Window> {
        (0..self.window_count(obs, pred))
            .map(|start| {
                let n = self.frames[start].len();
                let mut future = Tensor2D::zeros(n, 2 * pred);
                for k in 0..pred {
                    for (i, v) in self.frames[start + obs + k].vehicles.iter().enumerate() {
                        future.set(i, 2 * k, v.x);
                        future.set(i, 2 * k + 1, v.y);
                    }
                }
                Window {
                    episode_id: self.id,
                    start,
                    history: self.frames[start..start + obs].to_vec(),
                    future,
                }
            })
            .collect()
    }
}

/// First frame at which any pair of vehicles is closer than `threshold`.
pub fn scan_contact(positions: &[Vec<[f64; 2]>], dt: f64, threshold: f64) -> Label {
    for (k, frame) in positions.iter().enumerate() {
        for i in 0..frame.len() {
            for j in i + 1..frame.len() {
                let d = (frame[i][0] - frame[j][0]).hypot(frame[i][1] - frame[j][1]);
                if d < threshold {
                    return Label {
                        danger: true,
                        contact_time: Some(k as f64 * dt),
                    };
                }
            }
        }
    }
    Label {
        danger: false,
        contact_time: None,
    }
}

/// Episode together with the noiseless positions it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub episode: Episode,
    /// True positions per frame and vehicle.
    pub truth: Vec<Vec<[f64; 2]>>,
}

fn build_agents(spec: &ScenarioSpec, layout: &Layout) -> Vec<Agent> {
    let n = spec.vehicles;
    let v = layout.speed;
    let react = layout.reaction_delay.map(|d| layout.event_time + d);
    let follow_gap = 0.5 * v + 12.0;
    let mut agents = Vec::with_capacity(n);
    match spec.family {
        Family::SuddenBraking | Family::CurvedRoad => {
            agents.push(Agent::lane(0.0, v, 0.0, Control::Follow { from: react }));
            agents.push(Agent::lane(
                layout.gap,
                layout.actor_speed,
                0.0,
                Control::Pulse {
                    start: layout.event_time,
                    duration: layout.event_duration,
                    decel: layout.decel,
                },
            ));
            background(&mut agents, n, v, follow_gap, LANE_WIDTH, 0.5 * layout.gap);
        }
        Family::CutIn | Family::HighwayMerging => {
            let from = if spec.family == Family::CutIn { LANE_WIDTH } else { -LANE_WIDTH };
            agents.push(Agent::lane(0.0, v, 0.0, Control::Follow { from: react }));
            let mut actor = Agent::lane(
                layout.gap,
                layout.actor_speed,
                from,
                if layout.decel > 0.0 {
                    Control::Pulse {
                        start: layout.event_time,
                        duration: layout.event_duration,
                        decel: layout.decel,
                    }
                } else {
                    Control::Cruise
                },
            );
            actor.lateral = Lateral::Change {
                from,
                to: 0.0,
                start: layout.event_time,
                duration: layout.event_duration,
            };
            agents.push(actor);
            if n > 2 {
                agents.push(Agent::lane(layout.gap + 3.0 * follow_gap, v, 0.0, Control::Cruise));
            }
            background(&mut agents, n, v, follow_gap, -from, 0.0);
        }
        Family::UrbanIntersection => {
            // Both vehicles would reach the conflict point at the origin of
            // the crossing road; `gap` offsets the arrival times.
            let t_cross = layout.event_time + layout.event_duration;
            let x_c = v * (t_cross + layout.gap);
            agents.push(Agent::lane(
                0.0,
                v,
                0.0,
                Control::Yield {
                    from: react,
                    stop_s: x_c - 0.5 * LANE_WIDTH - VEHICLE_LENGTH,
                    blocker: 1,
                },
            ));
            agents.push(Agent {
                s: -layout.actor_speed * t_cross,
                v: layout.actor_speed,
                lateral: Lateral::Fixed(0.0),
                crossing: Some(x_c),
                control: Control::Cruise,
                idm: IdmParams::default(),
            });
            for k in 2..n {
                let rank = (k / 2) as f64;
                if k % 2 == 0 {
                    agents.push(Agent::lane(-rank * follow_gap, v, 0.0, Control::Follow { from: Some(0.0) }));
                } else {
                    agents.push(Agent {
                        s: -layout.actor_speed * t_cross - rank * (0.5 * layout.actor_speed + 12.0),
                        v: layout.actor_speed,
                        lateral: Lateral::Fixed(0.0),
                        crossing: Some(x_c),
                        control: Control::Cruise,
                        idm: IdmParams::default(),
                    });
                }
            }
        }
        Family::CongestedTraffic => {
            // Leader oscillates between `speed − decel` and `speed + decel`;
            // everyone else starts at the IDM equilibrium spacing.
            let mean = layout.speed;
            let amp = layout.decel;
            let v0 = mean - amp;
            let params = IdmParams::default().with_speed(mean + amp + 5.0);
            let spacing = equilibrium_gap(&params, v0) + VEHICLE_LENGTH;
            for k in 0..n {
                let control = if k == n - 1 {
                    Control::Wave {
                        amp,
                        period: layout.event_duration,
                    }
                } else {
                    Control::Follow { from: Some(0.0) }
                };
                let mut a = Agent::lane(k as f64 * spacing, v0, 0.0, control);
                a.idm = params;
                agents.push(a);
            }
        }
    }
    agents.truncate(n);
    agents
}

/// Fills the roster up to `n` with IDM followers behind the ego, alternating
/// between the ego lane and the lane at offset `side`.
fn background(agents: &mut Vec<Agent>, n: usize, v: f64, follow_gap: f64, side: f64, side_ahead: f64) {
    let base = agents.len();
    for k in base..n {
        let rank = ((k - base) / 2 + 1) as f64;
        let a = if (k - base) % 2 == 0 {
            Agent::lane(-rank * follow_gap, v, 0.0, Control::Follow { from: Some(0.0) })
        } else {
            Agent::lane(side_ahead - rank * follow_gap, v, side, Control::Follow { from: Some(0.0) })
        };
        agents.push(a);
    }
}

/// Bumper gap at which IDM acceleration vanishes behind a leader at the same
/// speed `v`.
pub fn equilibrium_gap(params: &IdmParams, v: f64) -> f64 {
    let free = 1.0 - (v / params.desired_speed).powf(params.delta);
    (params.min_gap + v * params.headway) / free.max(1e-12).sqrt()
}

fn finite_difference(values: &[[f64; 2]], prev: &[[f64; 2]], dt: f64) -> Vec<[f64; 2]> {
    values
        .iter()
        .zip(prev)
        .map(|(a, b)| [(a[0] - b[0]) / dt, (a[1] - b[1]) / dt])
        .collect()
}

/// Runs one episode with explicit `layout`.
pub fn simulate(spec: &ScenarioSpec, layout: &Layout, id: u64) -> Result<Simulation> {
    spec.validate()?;
    let kappa = if spec.family == Family::CurvedRoad { layout.kappa } else { 0.0 };
    let mut sim = Sim {
        road: Road { kappa },
        agents: build_agents(spec, layout),
    };
    let n = sim.agents.len();
    let frames = spec.frames();
    let mut truth = Vec::with_capacity(frames);
    for k in 0..frames {
        let t = k as f64 * spec.dt;
        truth.push((0..n).map(|i| sim.position(i, t)).collect::<Vec<_>>());
        sim.step(t, spec.dt);
    }
    for i in 0..n {
        for j in i + 1..n {
            let (p, q) = (truth[0][i], truth[0][j]);
            if (p[0] - q[0]).hypot(p[1] - q[1]) < CONTACT_THRESHOLD {
                return Err(Error::Infeasible(format!(
                    "{}: vehicles {i} and {j} overlap at t = 0",
                    spec.family
                )));
            }
        }
    }
    let label = scan_contact(&truth, spec.dt, CONTACT_THRESHOLD);
    if let Some(tc) = label.contact_time {
        let keep = (tc / spec.dt).round() as usize + (POST_CONTACT / spec.dt).round() as usize + 1;
        truth.truncate(keep.max(3));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("noise is finite"));
    let observed: Vec<Vec<[f64; 2]>> = truth
        .iter()
        .map(|f| {
            f.iter()
                .map(|p| match &noise {
                    Some(d) => [p[0] + d.sample(&mut rng), p[1] + d.sample(&mut rng)],
                    None => *p,
                })
                .collect()
        })
        .collect();
    let len = observed.len();
    let mut vel: Vec<Vec<[f64; 2]>> = (1..len).map(|k| finite_difference(&observed[k], &observed[k - 1], spec.dt)).collect();
    vel.insert(0, vel[0].clone());
    let mut acc: Vec<Vec<[f64; 2]>> = (2..len).map(|k| finite_difference(&vel[k], &vel[k - 1], spec.dt)).collect();
    acc.insert(0, acc[0].clone());
    acc.insert(0, acc[0].clone());

    let frames = (0..len)
        .map(|k| SceneFrame {
            timestamp: k as f64 * spec.dt,
            vehicles: (0..n)
                .map(|i| VehicleObservation {
                    id: i as u32,
                    x: observed[k][i][0],
                    y: observed[k][i][1],
                    vx: vel[k][i][0],
                    vy: vel[k][i][1],
                    ax: acc[k][i][0],
                    ay: acc[k][i][1],
                    length: VEHICLE_LENGTH,
                    width: VEHICLE_WIDTH,
                })
                .collect(),
        })
        .collect();
    Ok(Simulation {
        episode: Episode {
            id,
            family: spec.family,
            dt: spec.dt,
            kappa,
            frames,
            label,
        },
        truth,
    })
}

/// Generates the episode for `spec`, drawing its layout from `spec.seed`.
pub fn gen_scenario(spec: &ScenarioSpec, id: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = Layout::sample(spec, &mut rng);
    Ok(simulate(spec, &layout, id)?.episode)
}

/// Constant-velocity extrapolation from the last observed frame, as absolute
/// positions `N × 2T′`.
pub fn cv_baseline(history: &[SceneFrame], steps: usize, dt: f64) -> Result<Tensor2D> {
    if history.len() < 2 {
        return Err(Error::range("history", format!("{} frames, need at least 2", history.len())));
    }
    let last = history.last().expect("non-empty");
    let mut out = Tensor2D::zeros(last.len(), 2 * steps);
    for (i, v) in last.vehicles.iter().enumerate() {
        for k in 0..steps {
            let h = (k + 1) as f64 * dt;
            out.set(i, 2 * k, v.x + v.vx * h);
            out.set(i, 2 * k + 1, v.y + v.vy * h);
        }
    }
    Ok(out)
}

/// A set of generated or loaded episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryDataset {
    pub episodes: Vec<Episode>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Cal,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Cal => "cal",
            Split::Test => "test",
        })
    }
}

/// Episode-to-split assignment.
pub type SplitMap = BTreeMap<u64, Split>;

impl TrajectoryDataset {
    /// Generates one episode per spec in parallel; episode ids follow spec order.
    pub fn generate(specs: &[ScenarioSpec]) -> Result<Self> {
        let episodes = specs
            .par_iter()
            .enumerate()
            .map(|(i, s)| gen_scenario(s, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { episodes })
    }

    pub fn episode(&self, id: u64) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.id == id)
    }

    /// Stratified 70/15/15 split by episode within each family.
    pub fn split(&self, seed: u64) -> SplitMap {
        let mut by_family: BTreeMap<Family, Vec<u64>> = BTreeMap::new();
        for e in &self.episodes {
            by_family.entry(e.family).or_default().push(e.id);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = SplitMap::new();
        for (_, mut ids) in by_family {
            ids.shuffle(&mut rng);
            let n = ids.len();
            let train = (0.70 * n as f64).round() as usize;
            let cal = ((0.15 * n as f64).round() as usize).min(n - train);
            for (k, id) in ids.into_iter().enumerate() {
                let s = if k < train {
                    Split::Train
                } else if k < train + cal {
                    Split::Cal
                } else {
                    Split::Test
                };
                out.insert(id, s);
            }
        }
        out
    }

    /// Windows of every episode assigned to `which`.
    pub fn windows(&self, split: &SplitMap, which: Split, obs: usize, pred: usize) -> Vec<Window> {
        self.episodes
            .iter()
            .filter(|e| split.get(&e.id) == Some(&which))
            .flat_map(|e| e.windows(obs, pred))
            .collect()
    }

    pub fn write(&self, dir: &Path, split: &SplitMap) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut traj = Vec::new();
        let mut labels = Vec::new();
        let mut roads = Vec::new();
        for e in &self.episodes {
            labels.push(LabelRow {
                episode_id: e.id,
                danger: e.label.danger,
                contact_time: e.label.contact_time,
                family: e.family,
            });
            roads.push(RoadRow {
                episode_id: e.id,
                dt: e.dt,
                kappa: e.kappa,
            });
            for f in &e.frames {
                for v in &f.vehicles {
                    traj.push(TrajRow {
                        episode_id: e.id,
                        t: f.timestamp,
                        vehicle_id: v.id,
                        x: v.x,
                        y: v.y,
                        vx: v.vx,
                        vy: v.vy,
                        ax: v.ax,
                        ay: v.ay,
                        length: v.length,
                        width: v.width,
                    });
                }
            }
        }
        let splits: Vec<SplitRow> = split.iter().map(|(&episode_id, &split)| SplitRow { episode_id, split }).collect();
        write_csv(&dir.join(TRAJECTORIES), &traj)?;
        write_csv(&dir.join(LABELS), &labels)?;
        write_csv(&dir.join(ROADS), &roads)?;
        write_csv(&dir.join(SPLITS), &splits)
    }

    pub fn read(dir: &Path) -> Result<(Self, SplitMap)> {
        let labels: Vec<LabelRow> = read_csv(&dir.join(LABELS))?;
        let roads: BTreeMap<u64, RoadRow> = read_csv::<RoadRow>(&dir.join(ROADS))?.into_iter().map(|r| (r.episode_id, r)).collect();
        let split: SplitMap = read_csv::<SplitRow>(&dir.join(SPLITS))?
            .into_iter()
            .map(|r| (r.episode_id, r.split))
            .collect();
        let traj_path = dir.join(TRAJECTORIES);
        let rows: Vec<TrajRow> = read_csv(&traj_path)?;
        let mut frames: BTreeMap<u64, BTreeMap<usize, SceneFrame>> = BTreeMap::new();
        for (line, r) in rows.into_iter().enumerate() {
            let road = roads.get(&r.episode_id).ok_or_else(|| Error::Format {
                kind: "trajectories",
                location: format!("{}:{}", traj_path.display(), line + 2),
                detail: format!("episode {} has no road record", r.episode_id),
            })?;
            let k = (r.t / road.dt).round() as usize;
            let frame = frames.entry(r.episode_id).or_default().entry(k).or_insert_with(|| SceneFrame {
                timestamp: r.t,
                vehicles: Vec::new(),
            });
            frame.vehicles.push(VehicleObservation {
                id: r.vehicle_id,
                x: r.x,
                y: r.y,
                vx: r.vx,
                vy: r.vy,
                ax: r.ax,
                ay: r.ay,
                length: r.length,
                width: r.width,
            });
        }
        let mut episodes = Vec::with_capacity(labels.len());
        for l in labels {
            let road = roads.get(&l.episode_id).ok_or_else(|| Error::Format {
                kind: "roads",
                location: dir.join(ROADS).display().to_string(),
                detail: format!("episode {} missing", l.episode_id),
            })?;
            let fs: Vec<SceneFrame> = frames.remove(&l.episode_id).unwrap_or_default().into_values().collect();
            if fs.is_empty() {
                return Err(Error::Format {
                    kind: "trajectories",
                    location: traj_path.display().to_string(),
                    detail: format!("episode {} has no frames", l.episode_id),
                });
            }
            for (k, f) in fs.iter().enumerate() {
                let roster: Vec<u32> = f.vehicles.iter().map(|v| v.id).collect();
                if roster != fs[0].vehicles.iter().map(|v| v.id).collect::<Vec<_>>() {
                    return Err(Error::RosterMismatch { frame: k });
                }
            }
            episodes.push(Episode {
                id: l.episode_id,
                family: l.family,
                dt: road.dt,
                kappa: road.kappa,
                frames: fs,
                label: Label {
                    danger: l.danger,
                    contact_time: l.contact_time,
                },
            });
        }
        Ok((Self { episodes }, split))
    }
}

pub const TRAJECTORIES: &str = "trajectories.csv";
pub const LABELS: &str = "labels.csv";
pub const ROADS: &str = "roads.csv";
pub const SPLITS: &str = "split.csv";

#[derive(Debug, Serialize, Deserialize)]
struct TrajRow {
    episode_id: u64,
    t: f64,
    vehicle_id: u32,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    ax: f64,
    ay: f64,
    length: f64,
    width: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    episode_id: u64,
    danger: bool,
    contact_time: Option<f64>,
    family: Family,
}

#[derive(Debug, Serialize, Deserialize)]
struct RoadRow {
    episode_id: u64,
    dt: f64,
    kappa: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    episode_id: u64,
    split: Split,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let location = match e.position() {
        Some(p) => format!("{}:{}", path.display(), p.line()),
        None => path.display().to_string(),
    };
    Error::Format {
        kind: "csv",
        location,
        detail: e.to_string(),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// SHA-256 over the dataset files in a fixed order, as lowercase hex.
pub fn fingerprint(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [TRAJECTORIES, LABELS, ROADS, SPLITS] {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Dataset-level generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub families: Vec<Family>,
    pub episodes_per_family: usize,
    pub vehicles: usize,
    pub duration: f64,
    pub dt: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            episodes_per_family: 20,
            vehicles: 4,
            duration: 8.0,
            dt: 0.1,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    /// One spec per episode with a distinct derived seed.
    pub fn specs(&self) -> Vec<ScenarioSpec> {
        let mut out = Vec::with_capacity(self.families.len() * self.episodes_per_family);
        for (fi, &family) in self.families.iter().enumerate() {
            for e in 0..self.episodes_per_family {
                let seed = self
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(((fi as u64) << 32) | e as u64);
                out.push(ScenarioSpec {
                    family,
                    vehicles: self.vehicles,
                    duration: self.duration,
                    dt: self.dt,
                    noise: self.noise,
                    kappa: None,
                    seed,
                });
            }
        }
        out
    }
}

/// Generated episodes together with their split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub data: TrajectoryDataset,
    pub split: SplitMap,
}

impl SplitDataset {
    pub fn windows(&self, which: Split, obs: usize, pred: usize) -> Vec<Window> {
        self.data.windows(&self.split, which, obs, pred)
    }

    pub fn episodes(&self, which: Split) -> impl Iterator<Item = &Episode> {
        self.data.episodes.iter().filter(move |e| self.split.get(&e.id) == Some(&which))
    }
}

/// Generates every spec and splits episodes with `split_seed`. Fails when an
/// episode is too short for a single window.
pub fn make_dataset(specs: &[ScenarioSpec], obs: usize, pred: usize, split_seed: u64) -> Result<SplitDataset> {
    let data = TrajectoryDataset::generate(specs)?;
    if let Some(e) = data.episodes.iter().find(|e| e.window_count(obs, pred) == 0) {
        return Err(Error::range(
            "episode length",
            format!("episode {} has {} frames, need {}", e.id, e.frames.len(), obs + pred),
        ));
    }
    let split = data.split(split_seed);
    Ok(SplitDataset { data, split })
}
