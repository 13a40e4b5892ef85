//! Scenario data model and its JSON file format.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Pose2D};

mod synth;
mod tokens;

pub use synth::{generate_synthetic, Family, SynthSpec};
pub use tokens::{
    agent_node_features, gt_step_states, nearest_map_token, point_segment_distance, tl_node_features, tokenize_agents,
    tokenize_map, tokenize_traffic_lights, AgentStatics, AgentTokens, MapTokens, PointNet, TlTokens, AGENT_NODE_DIM,
    MAP_NODE_DIM, TL_NODE_DIM,
};

pub const FORMAT_VERSION: u32 = 1;
pub const EPISODE_LEN: usize = 91;
pub const DT: f64 = 0.1;
/// Steps of observed history, including the current step.
pub const HISTORY: usize = 11;
pub const MAP_BUDGET: usize = 1024;
pub const TL_BUDGET: usize = 128;
pub const AGENT_BUDGET: usize = 64;
pub const SEGMENTS_PER_TOKEN: usize = 20;
pub const SEGMENT_LEN: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneType {
    Lane,
    RoadLine,
    RoadEdge,
    Crosswalk,
}

impl LaneType {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum TlState {
    Unknown = 0,
    Red = 1,
    Yellow = 2,
    Green = 3,
}

impl TlState {
    pub const COUNT: usize = 4;
}

impl TryFrom<u8> for TlState {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Self::Unknown),
            1 => Ok(Self::Red),
            2 => Ok(Self::Yellow),
            3 => Ok(Self::Green),
            _ => Err(format!("traffic light state {v} outside 0..=3")),
        }
    }
}

impl From<TlState> for u8 {
    fn from(s: TlState) -> u8 {
        s as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One logged step: `[x, y, theta, vx, vy, valid]`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "RawState", into = "RawState")]
pub struct StateRecord {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Flag {
    Bool(bool),
    Int(u8),
}

#[derive(Serialize, Deserialize)]
struct RawState(f64, f64, f64, f64, f64, Flag);

impl From<RawState> for StateRecord {
    fn from(r: RawState) -> Self {
        let valid = match r.5 {
            Flag::Bool(b) => b,
            Flag::Int(i) => i != 0,
        };
        Self {
            x: r.0,
            y: r.1,
            theta: r.2,
            vx: r.3,
            vy: r.4,
            valid,
        }
    }
}

impl From<StateRecord> for RawState {
    fn from(s: StateRecord) -> Self {
        RawState(s.x, s.y, s.theta, s.vx, s.vy, Flag::Bool(s.valid))
    }
}

impl StateRecord {
    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.x, self.y, self.theta)
    }

    /// Velocity projected on the heading; negative when reversing.
    pub fn signed_speed(&self) -> f64 {
        self.vx * self.theta.cos() + self.vy * self.theta.sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub id: u64,
    pub lane_type: LaneType,
    pub points: Vec<[f64; 2]>,
}

impl MapPolyline {
    pub fn arc_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub polyline_id: u64,
    pub states: Vec<TlState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u64,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub controlled: bool,
    /// Constant elevation re-attached to outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    pub states: Vec<StateRecord>,
}

impl AgentTrack {
    pub fn valid_steps(&self) -> usize {
        self.states.iter().filter(|s| s.valid).count()
    }

    /// Last valid step at or before `t`.
    pub fn last_valid_at(&self, t: usize) -> Option<usize> {
        (0..=t.min(self.states.len().saturating_sub(1))).rev().find(|&s| self.states[s].valid)
    }

    pub fn last_valid(&self) -> Option<usize> {
        self.states.iter().rposition(|s| s.valid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub dt: f64,
    pub episode_len: usize,
    pub map: Vec<MapPolyline>,
    pub traffic_lights: Vec<TrafficLight>,
    pub agents: Vec<AgentTrack>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.version != FORMAT_VERSION {
            return Err(invalid("version", format!("unsupported version {}, expected {FORMAT_VERSION}", self.version)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.episode_len == 0 {
            return Err(invalid("episode_len", "must be at least 1"));
        }
        let mut ids = HashSet::new();
        for (i, p) in self.map.iter().enumerate() {
            if !ids.insert(p.id) {
                return Err(invalid(format!("map[{i}].id"), format!("duplicate polyline id {}", p.id)));
            }
            if p.points.len() < 2 {
                return Err(invalid(format!("map[{i}].points"), "needs at least 2 points"));
            }
            if p.points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid(format!("map[{i}].points"), "non-finite coordinate"));
            }
        }
        for (i, tl) in self.traffic_lights.iter().enumerate() {
            if !ids.contains(&tl.polyline_id) {
                return Err(invalid(
                    format!("traffic_lights[{i}].polyline_id"),
                    format!("no map polyline with id {}", tl.polyline_id),
                ));
            }
            if tl.states.len() != self.episode_len {
                return Err(invalid(
                    format!("traffic_lights[{i}].states"),
                    format!("expected {} steps, got {}", self.episode_len, tl.states.len()),
                ));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.length.is_finite() && a.length > 0.0 && a.width.is_finite() && a.width > 0.0) {
                return Err(invalid(format!("agents[{i}].length"), "size must be positive"));
            }
            if a.states.len() != self.episode_len {
                return Err(invalid(
                    format!("agents[{i}].states"),
                    format!("expected {} steps, got {}", self.episode_len, a.states.len()),
                ));
            }
            for (t, s) in a.states.iter().enumerate() {
                if s.valid && ![s.x, s.y, s.theta, s.vx, s.vy].iter().all(|v| v.is_finite()) {
                    return Err(invalid(format!("agents[{i}].states[{t}]"), "non-finite value on a valid step"));
                }
            }
            if a.z.is_some_and(|z| !z.is_finite()) {
                return Err(invalid(format!("agents[{i}].z"), "non-finite"));
            }
        }
        Ok(())
    }

    pub fn polyline_index(&self, id: u64) -> Option<usize> {
        self.map.iter().position(|p| p.id == id)
    }

    /// Indices of at most `max` agents, preferring those with more valid
    /// steps; ties go to the lower index. Returned in ascending order.
    pub fn select_agents(&self, max: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.agents.len()).collect();
        if order.len() > max {
            order.sort_by_key(|&i| (std::cmp::Reverse(self.agents[i].valid_steps()), i));
            order.truncate(max);
            order.sort_unstable();
        }
        order
    }

    /// The same scene under the rigid transform `g` (applied on the left).
    pub fn transformed(&self, g: &Pose2D) -> Scenario {
        let (c, s) = (g.theta.cos(), g.theta.sin());
        let mut out = self.clone();
        for p in &mut out.map {
            for pt in &mut p.points {
                let (x, y) = g.to_world(pt[0], pt[1]);
                *pt = [x, y];
            }
        }
        for a in &mut out.agents {
            for st in &mut a.states {
                if !st.valid {
                    continue;
                }
                let (x, y) = g.to_world(st.x, st.y);
                let (vx, vy) = (c * st.vx - s * st.vy, s * st.vx + c * st.vy);
                *st = StateRecord {
                    x,
                    y,
                    theta: wrap_angle(st.theta + g.theta),
                    vx,
                    vy,
                    valid: true,
                };
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Scenario, SceneError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SceneError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }
}

pub fn read_scenario(path: &Path) -> Result<Scenario, SceneError> {
    let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scenario::from_json(&text)
}

pub fn write_scenario(scenario: &Scenario, path: &Path) -> Result<(), SceneError> {
    scenario.validate()?;
    fs::write(path, scenario.to_json()).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}
