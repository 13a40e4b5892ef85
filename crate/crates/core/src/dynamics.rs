//! Unicycle kinematics, action limits, box collisions and log-replay override.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Pose2D, PoseValues};
use crate::numcore::{Tape, Tensor, Value};
use crate::scene::{AgentKind, AgentTrack, StateRecord};

#[derive(Debug, Error)]
pub enum DynError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindParams {
    pub max_accel: f64,
    pub max_decel: f64,
    pub max_yaw_rate: f64,
    pub max_speed: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KindTable {
    pub vehicle: KindParams,
    pub pedestrian: KindParams,
    pub cyclist: KindParams,
}

impl Default for KindTable {
    fn default() -> Self {
        Self {
            vehicle: KindParams {
                max_accel: 4.0,
                max_decel: 6.0,
                max_yaw_rate: 0.8,
                max_speed: 30.0,
            },
            pedestrian: KindParams {
                max_accel: 2.0,
                max_decel: 2.0,
                max_yaw_rate: 2.0,
                max_speed: 3.0,
            },
            cyclist: KindParams {
                max_accel: 3.0,
                max_decel: 3.0,
                max_yaw_rate: 1.5,
                max_speed: 10.0,
            },
        }
    }
}

impl KindTable {
    pub fn get(&self, kind: AgentKind) -> &KindParams {
        match kind {
            AgentKind::Vehicle => &self.vehicle,
            AgentKind::Pedestrian => &self.pedestrian,
            AgentKind::Cyclist => &self.cyclist,
        }
    }
}

/// Kinematic state; `v` is signed speed along the heading.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub z: f64,
}

impl AgentState {
    pub fn from_record(r: &StateRecord, z: f64) -> Self {
        Self {
            x: r.x,
            y: r.y,
            theta: r.theta,
            v: r.signed_speed(),
            z,
        }
    }

    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.x, self.y, self.theta)
    }

    fn is_finite(&self) -> bool {
        [self.x, self.y, self.theta, self.v].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Action {
    pub accel: f64,
    pub yaw_rate: f64,
}

pub fn clamp_action(a: Action, p: &KindParams) -> Action {
    Action {
        accel: a.accel.clamp(-p.max_decel, p.max_accel),
        yaw_rate: a.yaw_rate.clamp(-p.max_yaw_rate, p.max_yaw_rate),
    }
}

/// Semi-implicit Euler: speed and heading first, then position.
pub fn step(s: &AgentState, a: Action, dt: f64, p: &KindParams) -> Result<AgentState, DynError> {
    if !s.is_finite() {
        return Err(DynError::NonFinite("state"));
    }
    if !(a.accel.is_finite() && a.yaw_rate.is_finite()) {
        return Err(DynError::NonFinite("action"));
    }
    let v = (s.v + a.accel * dt).clamp(-p.max_speed, p.max_speed);
    let theta = wrap_angle(s.theta + a.yaw_rate * dt);
    Ok(AgentState {
        x: s.x + v * theta.cos() * dt,
        y: s.y + v * theta.sin() * dt,
        theta,
        v,
        z: s.z,
    })
}

/// The action that takes `prev` to `next` under `step`, ignoring clamps.
pub fn inverse_dynamics(prev: &AgentState, next: &AgentState, dt: f64) -> Action {
    Action {
        accel: (next.v - prev.v) / dt,
        yaw_rate: wrap_angle(next.theta - prev.theta) / dt,
    }
}

/// Replaces the predicted next state of every uncontrolled agent with its
/// logged state at `t + 1`; where the log is invalid the current state holds.
pub fn apply_override(next: &mut [AgentState], current: &[AgentState], tracks: &[&AgentTrack], t: usize) {
    for (i, track) in tracks.iter().enumerate() {
        if track.controlled {
            continue;
        }
        next[i] = match track.states.get(t + 1) {
            Some(r) if r.valid => AgentState::from_record(r, current[i].z),
            _ => current[i],
        };
    }
}

/// Oriented box centered on a pose, `length` along the heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obb {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub length: f64,
    pub width: f64,
}

impl Obb {
    pub fn new(pose: Pose2D, length: f64, width: f64) -> Self {
        Self {
            x: pose.x,
            y: pose.y,
            theta: pose.theta,
            length,
            width,
        }
    }

    fn axes(&self) -> [(f64, f64); 2] {
        let (c, s) = (self.theta.cos(), self.theta.sin());
        [(c, s), (-s, c)]
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let [(ax, ay), (bx, by)] = self.axes();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .map(|(sl, sw)| (self.x + sl * hl * ax + sw * hw * bx, self.y + sl * hl * ay + sw * hw * by))
    }

    /// Inclusive point containment.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let [(ax, ay), (bx, by)] = self.axes();
        let (dx, dy) = (px - self.x, py - self.y);
        (dx * ax + dy * ay).abs() <= self.length / 2.0 && (dx * bx + dy * by).abs() <= self.width / 2.0
    }
}

/// Separating-axis overlap test; touching boxes collide.
pub fn collide(a: &Obb, b: &Obb) -> bool {
    let reach = (a.length.hypot(a.width) + b.length.hypot(b.width)) / 2.0;
    if (a.x - b.x).hypot(a.y - b.y) > reach {
        return false;
    }
    let (ca, cb) = (a.corners(), b.corners());
    for (ax, ay) in a.axes().into_iter().chain(b.axes()) {
        let project = |cs: &[(f64, f64); 4]| {
            cs.iter()
                .map(|(x, y)| x * ax + y * ay)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p), hi.max(p)))
        };
        let (alo, ahi) = project(&ca);
        let (blo, bhi) = project(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// Batched differentiable state, one entry per agent.
#[derive(Clone, Copy, Debug)]
pub struct StateValues<'t> {
    pub x: Value<'t>,
    pub y: Value<'t>,
    pub theta: Value<'t>,
    pub v: Value<'t>,
}

impl<'t> StateValues<'t> {
    pub fn constant(tape: &'t Tape, states: &[AgentState]) -> Self {
        let col = |f: fn(&AgentState) -> f64| tape.constant(Tensor::from_vec(states.iter().map(f).collect()));
        Self {
            x: col(|s| s.x),
            y: col(|s| s.y),
            theta: col(|s| s.theta),
            v: col(|s| s.v),
        }
    }

    pub fn len(&self) -> usize {
        self.x.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn poses(&self) -> PoseValues<'t> {
        PoseValues {
            x: self.x,
            y: self.y,
            theta: self.theta,
        }
    }

    /// Plain values; `z` comes from `template`.
    pub fn to_states(&self, template: &[AgentState]) -> Vec<AgentState> {
        let (x, y, th, v) = (self.x.data(), self.y.data(), self.theta.data(), self.v.data());
        (0..self.len())
            .map(|i| AgentState {
                x: x[i],
                y: y[i],
                theta: th[i],
                v: v[i],
                z: template[i].z,
            })
            .collect()
    }

    /// Per-agent select: `other` where `take[i]`, else `self`.
    pub fn select(&self, other: &StateValues<'t>, take: &[bool]) -> StateValues<'t> {
        if !take.iter().any(|t| *t) {
            return *self;
        }
        let tape = self.x.tape();
        let m = tape.constant(Tensor::from_vec(take.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect()));
        let keep = tape.constant(Tensor::from_vec(take.iter().map(|&t| if t { 0.0 } else { 1.0 }).collect()));
        let mix = |a: Value<'t>, b: Value<'t>| a * keep + b * m;
        StateValues {
            x: mix(self.x, other.x),
            y: mix(self.y, other.y),
            theta: mix(self.theta, other.theta),
            v: mix(self.v, other.v),
        }
    }

    /// Differentiable counterpart of [`step`]; the speed clamp passes
    /// gradient only inside its bounds.
    pub fn step(&self, accel: Value<'t>, yaw_rate: Value<'t>, dt: f64, max_speed: &[f64]) -> StateValues<'t> {
        let lo: Vec<f64> = max_speed.iter().map(|m| -m).collect();
        let v = (self.v + accel * dt).clamp_each(&lo, max_speed);
        let theta = (self.theta + yaw_rate * dt).wrap_angle();
        StateValues {
            x: self.x + v * theta.cos() * dt,
            y: self.y + v * theta.sin() * dt,
            theta,
            v,
        }
    }
}

/// Maps raw policy outputs `[N, 2]` to bounded accelerations and yaw rates.
pub fn squash_actions<'t>(raw: Value<'t>, params: &[KindParams]) -> (Value<'t>, Value<'t>) {
    let n = params.len();
    let tape = raw.tape();
    let col = |f: fn(&KindParams) -> f64| tape.constant(Tensor::from_vec(params.iter().map(f).collect()));
    let accel_raw = raw.slice_last(0, 1).reshape(&[n]);
    let yaw_raw = raw.slice_last(1, 1).reshape(&[n]);
    let lo: Vec<f64> = params.iter().map(|p| -p.max_decel).collect();
    let hi: Vec<f64> = params.iter().map(|p| p.max_accel).collect();
    let accel = (accel_raw.tanh() * col(|p| p.max_accel.max(p.max_decel))).clamp_each(&lo, &hi);
    let yaw = yaw_raw.tanh() * col(|p| p.max_yaw_rate);
    (accel, yaw)
}
