//! Synthetic scenarios: straight roads, curves and four-way intersections.
//!
//! Agents are driven by a path-following controller through the same
//! unicycle model used in simulation, so every logged transition is exactly
//! reproducible by `dynamics::step`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AgentKind, AgentTrack, LaneType, MapPolyline, Scenario, SceneError, StateRecord, TlState, TrafficLight,
    AGENT_BUDGET, DT, EPISODE_LEN, FORMAT_VERSION,
};
use crate::dynamics::{step, Action, AgentState, KindTable};
use crate::geom::{wrap_angle, Pose2D};

const LANE_WIDTH: f64 = 3.5;
const PATH_STEP: f64 = 0.25;
const COMFORT_DECEL: f64 = 2.0;
const LATERAL_ACCEL: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Straight,
    Curve,
    Intersection,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Straight => "straight",
            Family::Curve => "curve",
            Family::Intersection => "intersection",
        })
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "straight" => Ok(Family::Straight),
            "curve" => Ok(Family::Curve),
            "intersection" => Ok(Family::Intersection),
            _ => Err(format!("unknown scenario family `{s}` (straight|curve|intersection)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub family: Family,
    pub agents: usize,
    /// Lanes per direction on straight and curved roads.
    pub lanes: usize,
    pub cyclist_fraction: f64,
    /// Share of agents that appear a few steps into the episode.
    pub late_fraction: f64,
    pub uncontrolled_fraction: f64,
    pub episode_len: usize,
    pub dt: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            family: Family::Intersection,
            agents: 12,
            lanes: 2,
            cyclist_fraction: 0.1,
            late_fraction: 0.15,
            uncontrolled_fraction: 0.0,
            episode_len: EPISODE_LEN,
            dt: DT,
        }
    }
}

impl SynthSpec {
    pub fn new(family: Family, agents: usize) -> Self {
        Self {
            family,
            agents,
            ..Self::default()
        }
    }
}

/// Dense centerline an agent follows.
#[derive(Clone, Debug)]
struct Path {
    pts: Vec<[f64; 2]>,
    kappa: Vec<f64>,
    stop_s: Option<f64>,
}

fn densify(points: &[[f64; 2]], step: f64) -> Vec<[f64; 2]> {
    let mut out = vec![points[0]];
    let mut carry = 0.0;
    for w in points.windows(2) {
        let len = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        let mut s = step - carry;
        while s <= len {
            let f = s / len;
            out.push([w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])]);
            s += step;
        }
        carry = len - (s - step);
    }
    out
}

impl Path {
    /// Follows `points`, then runs straight on for `extend` meters.
    fn new(points: &[[f64; 2]], stop_s: Option<f64>, extend: f64) -> Path {
        let mut pts = densify(points, PATH_STEP);
        let n = pts.len();
        let (a, b) = (pts[n - 2], pts[n - 1]);
        let h = (b[1] - a[1]).atan2(b[0] - a[0]);
        for k in 1..=(extend / PATH_STEP) as usize {
            let d = k as f64 * PATH_STEP;
            pts.push([b[0] + d * h.cos(), b[1] + d * h.sin()]);
        }
        let heading: Vec<f64> = pts.windows(2).map(|w| (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0])).collect();
        let mut kappa: Vec<f64> = heading.windows(2).map(|w| wrap_angle(w[1] - w[0]) / PATH_STEP).collect();
        // Smooth out the kinks left where polylines meet.
        let raw = kappa.clone();
        for i in 0..kappa.len() {
            let lo = i.saturating_sub(4);
            let hi = (i + 5).min(raw.len());
            kappa[i] = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
        kappa.push(0.0);
        kappa.push(0.0);
        Path { pts, kappa, stop_s }
    }

    fn len(&self) -> f64 {
        (self.pts.len() - 1) as f64 * PATH_STEP
    }

    fn at(&self, s: f64) -> [f64; 2] {
        let u = (s / PATH_STEP).clamp(0.0, (self.pts.len() - 1) as f64);
        let i = (u.floor() as usize).min(self.pts.len() - 2);
        let f = u - i as f64;
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    }

    fn heading_at(&self, s: f64) -> f64 {
        let a = self.at(s);
        let b = self.at(s + PATH_STEP);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Arc length of the path point nearest `p` within `[lo, hi]`, with its
    /// distance.
    fn project(&self, p: [f64; 2], lo: f64, hi: f64) -> (f64, f64) {
        let i0 = (lo.max(0.0) / PATH_STEP) as usize;
        let i1 = ((hi / PATH_STEP) as usize).min(self.pts.len() - 1);
        let mut best = (f64::INFINITY, 0);
        for i in i0..=i1.max(i0) {
            let q = self.pts[i.min(self.pts.len() - 1)];
            let d = (q[0] - p[0]).hypot(q[1] - p[1]);
            if d < best.0 {
                best = (d, i);
            }
        }
        (best.1 as f64 * PATH_STEP, best.0)
    }

    /// Fastest speed from which every curve and the stop point ahead can be
    /// met with comfortable braking.
    fn speed_limit(&self, s: f64, max_yaw: f64) -> f64 {
        let mut limit = f64::INFINITY;
        let i0 = (s / PATH_STEP) as usize;
        let i1 = (((s + 60.0) / PATH_STEP) as usize).min(self.kappa.len() - 1);
        for i in i0..=i1 {
            let k = self.kappa[i].abs();
            if k < 1e-4 {
                continue;
            }
            let v = (LATERAL_ACCEL / k).sqrt().min(0.7 * max_yaw / k);
            let ahead = (i as f64 * PATH_STEP - s).max(0.0);
            limit = limit.min((v * v + 2.0 * COMFORT_DECEL * ahead).sqrt());
        }
        if let Some(stop) = self.stop_s {
            limit = limit.min((2.0 * COMFORT_DECEL * (stop - s).max(0.0)).sqrt());
        }
        limit
    }
}

struct Layout {
    map: Vec<MapPolyline>,
    lights: Vec<TrafficLight>,
    paths: Vec<Path>,
    /// Start regions on physical lanes: (path choices, first s, last s).
    lanes: Vec<(Vec<usize>, f64, f64)>,
}

fn arc(center: [f64; 2], radius: f64, from: f64, to: f64) -> Vec<[f64; 2]> {
    let n = (((to - from).abs() * radius) / 1.0).ceil().max(2.0) as usize;
    (0..=n)
        .map(|k| {
            let a = from + (to - from) * k as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

fn line(a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    vec![a, b]
}

fn transform(g: &Pose2D, pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    pts.iter()
        .map(|p| {
            let (x, y) = g.to_world(p[0], p[1]);
            [x, y]
        })
        .collect()
}

struct MapBuilder {
    g: Pose2D,
    map: Vec<MapPolyline>,
}

impl MapBuilder {
    fn add(&mut self, lane_type: LaneType, pts: &[[f64; 2]]) -> (u64, Vec<[f64; 2]>) {
        let id = self.map.len() as u64;
        let world = transform(&self.g, pts);
        self.map.push(MapPolyline {
            id,
            lane_type,
            points: world.clone(),
        });
        (id, world)
    }
}

fn road_layout(family: Family, lanes: usize, g: Pose2D, rng: &mut ChaCha8Rng) -> Layout {
    let mut mb = MapBuilder { g, map: vec![] };
    let mut paths = vec![];
    let mut out_lanes = vec![];
    // Centerline at lateral offset `d` (positive to the left of +x travel).
    let (shape, length): (Box<dyn Fn(f64) -> Vec<[f64; 2]>>, f64) = match family {
        Family::Straight => (Box::new(|d: f64| line([-160.0, d], [160.0, d])), 320.0),
        _ => {
            let r: f64 = rng.random_range(80.0..150.0);
            let span = 330.0 / r;
            (Box::new(move |d: f64| arc([0.0, r], r - d, -FRAC_PI_2, -FRAC_PI_2 + span)), 330.0)
        }
    };
    let n = lanes as f64;
    for k in 0..lanes {
        let d = (k as f64 + 0.5) * LANE_WIDTH;
        // Forward lanes keep right, reverse lanes mirror them.
        let (_, fwd) = mb.add(LaneType::Lane, &shape(-d));
        let mut rev_local = shape(d);
        rev_local.reverse();
        let (_, rev) = mb.add(LaneType::Lane, &rev_local);
        for pts in [fwd, rev] {
            paths.push(Path::new(&pts, None, 150.0));
            out_lanes.push((vec![paths.len() - 1], 2.0, length * 0.45));
        }
    }
    for k in 1..lanes {
        for sign in [-1.0, 1.0] {
            mb.add(LaneType::RoadLine, &shape(sign * k as f64 * LANE_WIDTH));
        }
    }
    mb.add(LaneType::RoadLine, &shape(0.0));
    mb.add(LaneType::RoadEdge, &shape(-n * LANE_WIDTH));
    mb.add(LaneType::RoadEdge, &shape(n * LANE_WIDTH));
    Layout {
        map: mb.map,
        lights: vec![],
        paths,
        lanes: out_lanes,
    }
}

fn intersection_layout(g: Pose2D, episode_len: usize, rng: &mut ChaCha8Rng) -> Layout {
    const ARM: f64 = 120.0;
    const STOP: f64 = 10.0;
    let h = LANE_WIDTH / 2.0;
    let mut mb = MapBuilder { g, map: vec![] };
    let ns_green = rng.random_bool(0.5);
    let mut inbound = vec![];
    let mut outbound = vec![];
    let mut straight = vec![];
    let mut right = vec![];
    let mut lights = vec![];
    // Build the north arm, then rotate it into the other three.
    for arm in 0..4 {
        let rot = Pose2D::new(0.0, 0.0, arm as f64 * FRAC_PI_2);
        let place = |pts: Vec<[f64; 2]>| transform(&rot, &pts);
        let (id, pts) = mb.add(LaneType::Lane, &place(line([-h, ARM], [-h, STOP])));
        let green = (arm % 2 == 0) == ns_green;
        let state = if green { TlState::Green } else { TlState::Red };
        lights.push(TrafficLight {
            polyline_id: id,
            states: vec![state; episode_len],
        });
        inbound.push((pts, green));
        outbound.push(mb.add(LaneType::Lane, &place(line([h, STOP], [h, ARM]))).1);
        straight.push(mb.add(LaneType::Lane, &place(line([-h, STOP], [-h, -STOP]))).1);
        right.push(mb.add(LaneType::Lane, &place(arc([-STOP, STOP], STOP - h, 0.0, -FRAC_PI_2))).1);
        mb.add(LaneType::RoadEdge, &place(line([-2.0 * h, STOP], [-2.0 * h, ARM])));
        mb.add(LaneType::RoadEdge, &place(line([2.0 * h, STOP], [2.0 * h, ARM])));
        mb.add(LaneType::RoadLine, &place(line([0.0, STOP], [0.0, ARM])));
        mb.add(LaneType::Crosswalk, &place(line([-2.0 * h, STOP + 2.0], [2.0 * h, STOP + 2.0])));
    }
    let mut paths = vec![];
    let mut lanes = vec![];
    for arm in 0..4 {
        let (inb, green) = &inbound[arm];
        let len = ARM - STOP;
        // Straight through lands on the opposite arm's outbound lane; a right
        // turn lands on the next arm clockwise.
        let mut choices = vec![];
        for (conn, exit) in [(&straight[arm], (arm + 2) % 4), (&right[arm], (arm + 1) % 4)] {
            let mut pts = inb.clone();
            pts.extend_from_slice(&conn[1..]);
            pts.extend_from_slice(&outbound[exit][1..]);
            let stop = if *green { None } else { Some(len - 4.0) };
            paths.push(Path::new(&pts, stop, 150.0));
            choices.push(paths.len() - 1);
        }
        lanes.push((choices, 0.0, len - 20.0));
        paths.push(Path::new(&outbound[arm], None, 150.0));
        lanes.push((vec![paths.len() - 1], 2.0, 60.0));
    }
    Layout {
        map: mb.map,
        lights,
        paths,
        lanes,
    }
}

struct Sim {
    path: usize,
    s: f64,
    kind: AgentKind,
    length: f64,
    width: f64,
    cruise: f64,
    state: AgentState,
}

/// Intelligent-driver following term plus tracking of the speed limit.
fn controller(me: &Sim, path: &Path, others: &[(f64, f64, [f64; 2])], table: &KindTable, dt: f64) -> Action {
    let p = table.get(me.kind);
    let v = me.state.v;
    let ld = (2.0 + 0.6 * v).clamp(3.0, 12.0);
    let target = path.at(me.s + ld);
    let local = me.state.pose().to_local(target[0], target[1]);
    let alpha = local.1.atan2(local.0);
    let yaw_rate = (v * 2.0 * alpha.sin() / ld).clamp(-0.9 * p.max_yaw_rate, 0.9 * p.max_yaw_rate);

    let limit = path.speed_limit(me.s, p.max_yaw_rate).min(me.cruise);
    let mut accel = 1.5 * (limit - v);
    // Nearest agent ahead on this path.
    let mut gap = f64::INFINITY;
    let mut lead_v = 0.0;
    for &(len, ov, pos) in others {
        let (dx, dy) = (pos[0] - me.state.x, pos[1] - me.state.y);
        if dx.hypot(dy) > 70.0 {
            continue;
        }
        let (s_other, lateral) = path.project(pos, me.s, me.s + 70.0);
        if lateral < 1.8 && s_other > me.s {
            let g = s_other - me.s - (len + me.length) / 2.0;
            if g < gap {
                gap = g;
                lead_v = ov;
            }
        }
    }
    if gap.is_finite() {
        let a_max = 0.8 * p.max_accel;
        let s_star = 2.0 + v * 1.2 + v * (v - lead_v) / (2.0 * (a_max * COMFORT_DECEL).sqrt());
        let idm = a_max * (1.0 - ((v / me.cruise) * (v / me.cruise)).powi(2) - (s_star.max(0.0) / gap.max(0.1)).powi(2));
        accel = accel.min(idm);
    }
    let accel = accel.clamp(-0.9 * p.max_decel, 0.9 * p.max_accel).max(-v / dt);
    Action { accel, yaw_rate }
}

pub fn generate_synthetic(seed: u64, spec: &SynthSpec) -> Result<Scenario, SceneError> {
    if spec.agents > AGENT_BUDGET {
        return Err(SceneError::Infeasible(format!("{} agents exceed the budget of {AGENT_BUDGET}", spec.agents)));
    }
    if spec.lanes == 0 || spec.lanes > 4 {
        return Err(SceneError::Infeasible(format!("lanes must be in 1..=4, got {}", spec.lanes)));
    }
    if spec.episode_len == 0 || !(spec.dt > 0.0) {
        return Err(SceneError::Infeasible("episode_len and dt must be positive".into()));
    }
    for (name, f) in [
        ("cyclist_fraction", spec.cyclist_fraction),
        ("late_fraction", spec.late_fraction),
        ("uncontrolled_fraction", spec.uncontrolled_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(SceneError::Infeasible(format!("{name} must be in [0, 1], got {f}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Pose2D::new(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0), rng.random_range(-PI..PI));
    let layout = match spec.family {
        Family::Intersection => intersection_layout(g, spec.episode_len, &mut rng),
        f => road_layout(f, spec.lanes, g, &mut rng),
    };

    // Start slots along each lane, spaced so that followers begin unhindered.
    let mut slots = vec![];
    for (li, (_, lo, hi)) in layout.lanes.iter().enumerate() {
        let mut s = lo + rng.random_range(0.0..6.0);
        while s <= *hi {
            slots.push((li, s));
            s += rng.random_range(22.0..34.0);
        }
    }
    if slots.len() < spec.agents {
        return Err(SceneError::Infeasible(format!(
            "{} agents requested, layout has room for {}",
            spec.agents,
            slots.len()
        )));
    }
    slots.shuffle(&mut rng);
    slots.truncate(spec.agents);
    slots.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let table = KindTable::default();
    let mut sims: Vec<Sim> = slots
        .iter()
        .map(|&(li, s)| {
            let choices = &layout.lanes[li].0;
            let pi = choices[rng.random_range(0..choices.len())];
            let path = &layout.paths[pi];
            let cyclist = rng.random_bool(spec.cyclist_fraction);
            let (kind, length, width, cruise) = if cyclist {
                (AgentKind::Cyclist, 1.8, 0.7, rng.random_range(3.0f64..6.0))
            } else {
                (AgentKind::Vehicle, rng.random_range(4.2..5.2), rng.random_range(1.8..2.1), rng.random_range(6.0..13.0))
            };
            let p = path.at(s);
            let v0 = (cruise * rng.random_range(0.7..1.0)).min(path.speed_limit(s, table.get(kind).max_yaw_rate));
            Sim {
                path: pi,
                s,
                kind,
                length,
                width,
                cruise,
                state: AgentState {
                    x: p[0],
                    y: p[1],
                    theta: path.heading_at(s),
                    v: v0,
                    z: 0.0,
                },
            }
        })
        .collect();

    let late: Vec<usize> = sims
        .iter()
        .map(|_| if rng.random_bool(spec.late_fraction) { rng.random_range(1..9) } else { 0 })
        .collect();
    let controlled: Vec<bool> = sims.iter().map(|_| !rng.random_bool(spec.uncontrolled_fraction)).collect();

    let mut logs: Vec<Vec<AgentState>> = sims.iter().map(|a| vec![a.state]).collect();
    for _ in 1..spec.episode_len {
        let snapshot: Vec<(f64, f64, [f64; 2])> = sims.iter().map(|a| (a.length, a.state.v, [a.state.x, a.state.y])).collect();
        let actions: Vec<Action> = sims
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let others: Vec<_> = snapshot.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| *o).collect();
                controller(a, &layout.paths[a.path], &others, &table, spec.dt)
            })
            .collect();
        for (i, a) in sims.iter_mut().enumerate() {
            a.state = step(&a.state, actions[i], spec.dt, table.get(a.kind)).expect("controller keeps states finite");
            let path = &layout.paths[a.path];
            a.s = path.project([a.state.x, a.state.y], a.s - 1.0, a.s + 4.0).0.min(path.len());
            logs[i].push(a.state);
        }
    }

    let agents = sims
        .iter()
        .enumerate()
        .map(|(i, a)| AgentTrack {
            id: i as u64,
            kind: a.kind,
            length: a.length,
            width: a.width,
            controlled: controlled[i],
            z: None,
            states: logs[i]
                .iter()
                .enumerate()
                .map(|(t, s)| {
                    if t < late[i] {
                        StateRecord::default()
                    } else {
                        StateRecord {
                            x: s.x,
                            y: s.y,
                            theta: s.theta,
                            vx: s.v * s.theta.cos(),
                            vy: s.v * s.theta.sin(),
                            valid: true,
                        }
                    }
                })
                .collect(),
        })
        .collect();
    let scenario = Scenario {
        version: FORMAT_VERSION,
        id: Some(format!("{}-{seed}", spec.family)),
        dt: spec.dt,
        episode_len: spec.episode_len,
        map: layout.map,
        traffic_lights: layout.lights,
        agents,
    };
    scenario.validate()?;
    Ok(scenario)
}
