//! Map, traffic-light and agent tokens with local node features.

use rand_chacha::ChaCha8Rng;

use super::{
    AgentKind, LaneType, Scenario, TlState, AGENT_BUDGET, HISTORY, MAP_BUDGET, SEGMENTS_PER_TOKEN, SEGMENT_LEN,
    TL_BUDGET,
};
use crate::dynamics::{AgentState, StateValues};
use crate::geom::{relative_pose_values, Pose2D, PoseValues};
use crate::numcore::{concat_last, Ctx, LayerNorm, Linear, ParamStore, Tape, Tensor, Value};

/// Segment start (2), segment vector (2), cos/sin of segment heading, lane one-hot.
pub const MAP_NODE_DIM: usize = 6 + LaneType::COUNT;
/// State one-hot plus time offset.
pub const TL_NODE_DIM: usize = TlState::COUNT + 1;
/// Position (2), cos/sin heading (2), velocity (2), size (2), kind one-hot,
/// valid flag, time offset.
pub const AGENT_NODE_DIM: usize = 8 + AgentKind::COUNT + 2;

/// Map tokens, each a chunk of at most 20 one-meter segments.
#[derive(Clone, Debug)]
pub struct MapTokens {
    pub poses: Vec<Pose2D>,
    /// `[N, 20, MAP_NODE_DIM]`
    pub nodes: Tensor,
    pub node_valid: Vec<bool>,
    /// Source polyline index per token.
    pub polyline: Vec<usize>,
    pub lane_type: Vec<LaneType>,
    /// World-frame resampled points of each token.
    pub points: Vec<Vec<[f64; 2]>>,
    /// Tokens dropped by the budget.
    pub truncated: usize,
}

impl MapTokens {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Points at unit arc-length spacing; the last segment may be shorter.
fn resample(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let total: f64 = points.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum();
    if total <= 0.0 {
        return vec![];
    }
    let n_seg = ((total / SEGMENT_LEN) - 1e-9).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(n_seg + 1);
    out.push(points[0]);
    let (mut seg, mut seg_start) = (0, 0.0);
    for k in 1..n_seg {
        let s = k as f64 * SEGMENT_LEN;
        loop {
            let (a, b) = (points[seg], points[seg + 1]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if s <= seg_start + len || seg + 2 == points.len() {
                let f = if len > 0.0 { (s - seg_start) / len } else { 0.0 };
                out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
                break;
            }
            seg_start += len;
            seg += 1;
        }
    }
    out.push(*points.last().unwrap());
    out
}

pub fn tokenize_map(scenario: &Scenario) -> MapTokens {
    tokenize_map_with_budget(scenario, MAP_BUDGET)
}

pub(crate) fn tokenize_map_with_budget(scenario: &Scenario, budget: usize) -> MapTokens {
    let mut chunks: Vec<(usize, Vec<[f64; 2]>)> = Vec::new();
    for (pi, poly) in scenario.map.iter().enumerate() {
        let pts = resample(&poly.points);
        if pts.is_empty() {
            log::warn!("map polyline {} has zero length, skipped", poly.id);
            continue;
        }
        let mut start = 0;
        while start + 1 < pts.len() {
            let end = (start + SEGMENTS_PER_TOKEN).min(pts.len() - 1);
            chunks.push((pi, pts[start..=end].to_vec()));
            start = end;
        }
    }
    let mut truncated = 0;
    if chunks.len() > budget {
        let n = chunks.len() as f64;
        let cx = chunks.iter().map(|c| c.1[0][0]).sum::<f64>() / n;
        let cy = chunks.iter().map(|c| c.1[0][1]).sum::<f64>() / n;
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        let d = |i: usize| (chunks[i].1[0][0] - cx).hypot(chunks[i].1[0][1] - cy);
        order.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
        order.truncate(budget);
        order.sort_unstable();
        truncated = chunks.len() - budget;
        log::warn!("map has {} tokens, kept the {budget} nearest the centroid", chunks.len());
        let mut keep = vec![false; chunks.len()];
        order.iter().for_each(|&i| keep[i] = true);
        let mut i = 0;
        chunks.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }

    let n = chunks.len();
    let mut nodes = Tensor::zeros(&[n, SEGMENTS_PER_TOKEN, MAP_NODE_DIM]);
    let mut node_valid = vec![false; n * SEGMENTS_PER_TOKEN];
    let mut poses = Vec::with_capacity(n);
    let mut lane_type = Vec::with_capacity(n);
    let data = nodes.data_mut();
    for (ti, (pi, pts)) in chunks.iter().enumerate() {
        let heading = (pts[1][1] - pts[0][1]).atan2(pts[1][0] - pts[0][0]);
        let pose = Pose2D::new(pts[0][0], pts[0][1], heading);
        let lt = scenario.map[*pi].lane_type;
        for (k, w) in pts.windows(2).enumerate() {
            let (sx, sy) = pose.to_local(w[0][0], w[0][1]);
            let (ex, ey) = pose.to_local(w[1][0], w[1][1]);
            let (dx, dy) = (ex - sx, ey - sy);
            let rel = dy.atan2(dx);
            let row = &mut data[(ti * SEGMENTS_PER_TOKEN + k) * MAP_NODE_DIM..][..MAP_NODE_DIM];
            row[..6].copy_from_slice(&[sx, sy, dx, dy, rel.cos(), rel.sin()]);
            row[6 + lt.index()] = 1.0;
            node_valid[ti * SEGMENTS_PER_TOKEN + k] = true;
        }
        poses.push(pose);
        lane_type.push(lt);
    }
    MapTokens {
        poses,
        nodes,
        node_valid,
        polyline: chunks.iter().map(|c| c.0).collect(),
        lane_type,
        points: chunks.into_iter().map(|c| c.1).collect(),
        truncated,
    }
}

pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Token whose resampled centerline passes closest to `p`; ties go to the
/// lower index. `None` when there are no tokens or none is eligible.
pub fn nearest_map_token(map: &MapTokens, p: [f64; 2], eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, pts) in map.points.iter().enumerate() {
        if !eligible(i) {
            continue;
        }
        let d = pts.windows(2).map(|w| point_segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|b| b.1)
}

/// Traffic lights placed at the end of their controlled polyline.
#[derive(Clone, Debug)]
pub struct TlTokens {
    pub poses: Vec<Pose2D>,
    /// Map token carrying the polyline's stop point.
    pub map_token: Vec<usize>,
    /// Per light, the full state sequence.
    pub states: Vec<Vec<TlState>>,
}

impl TlTokens {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

pub fn tokenize_traffic_lights(scenario: &Scenario, map: &MapTokens) -> TlTokens {
    let mut out = TlTokens {
        poses: vec![],
        map_token: vec![],
        states: vec![],
    };
    for tl in &scenario.traffic_lights {
        if out.len() == TL_BUDGET {
            log::warn!("more than {TL_BUDGET} traffic lights, extra ones dropped");
            break;
        }
        let Some(pi) = scenario.polyline_index(tl.polyline_id) else {
            continue;
        };
        let Some(tok) = (0..map.len()).rev().find(|&t| map.polyline[t] == pi) else {
            continue;
        };
        let pts = &map.points[tok];
        let (a, b) = (pts[pts.len() - 2], pts[pts.len() - 1]);
        out.poses.push(Pose2D::new(b[0], b[1], (b[1] - a[1]).atan2(b[0] - a[0])));
        out.map_token.push(tok);
        out.states.push(tl.states.clone());
    }
    out
}

/// State history `[N_tl, 11, TL_NODE_DIM]` ending at step `t`.
pub fn tl_node_features(tls: &TlTokens, t: usize) -> (Tensor, Vec<bool>) {
    let n = tls.len();
    let mut nodes = Tensor::zeros(&[n, HISTORY, TL_NODE_DIM]);
    let mut valid = vec![false; n * HISTORY];
    let data = nodes.data_mut();
    for (i, states) in tls.states.iter().enumerate() {
        for s in 0..HISTORY {
            let Some(step) = (t + s).checked_sub(HISTORY - 1) else {
                continue;
            };
            let Some(state) = states.get(step) else {
                continue;
            };
            let row = &mut data[(i * HISTORY + s) * TL_NODE_DIM..][..TL_NODE_DIM];
            row[*state as usize] = 1.0;
            row[TlState::COUNT] = (s as f64 - (HISTORY - 1) as f64) * 0.1;
            valid[i * HISTORY + s] = true;
        }
    }
    (nodes, valid)
}

/// Per-agent constants that enter every history node.
#[derive(Clone, Debug)]
pub struct AgentStatics {
    pub length: Vec<f64>,
    pub width: Vec<f64>,
    pub kind: Vec<AgentKind>,
}

impl AgentStatics {
    pub fn from_scenario(scenario: &Scenario, agents: &[usize]) -> Self {
        Self {
            length: agents.iter().map(|&i| scenario.agents[i].length).collect(),
            width: agents.iter().map(|&i| scenario.agents[i].width).collect(),
            kind: agents.iter().map(|&i| scenario.agents[i].kind).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.kind.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kind.is_empty()
    }
}

/// Agent tokens: node features over a window of steps, posed at an anchor.
#[derive(Clone, Debug)]
pub struct AgentTokens<'t> {
    /// `[N, T, AGENT_NODE_DIM]`
    pub nodes: Value<'t>,
    pub node_valid: Vec<bool>,
    pub poses: PoseValues<'t>,
    pub valid: Vec<bool>,
}

/// Logged states at step `t` for the given agents. Invalid steps are zeroed.
pub fn gt_step_states<'t>(tape: &'t Tape, scenario: &Scenario, agents: &[usize], t: usize) -> (StateValues<'t>, Vec<bool>) {
    let mut states = Vec::with_capacity(agents.len());
    let mut valid = Vec::with_capacity(agents.len());
    for &i in agents {
        let a = &scenario.agents[i];
        match a.states.get(t) {
            Some(r) if r.valid => {
                states.push(AgentState::from_record(r, 0.0));
                valid.push(true);
            }
            _ => {
                states.push(AgentState::default());
                valid.push(false);
            }
        }
    }
    (StateValues::constant(tape, &states), valid)
}

/// Builds `[N, T, AGENT_NODE_DIM]` features of `steps` expressed in each
/// agent's `anchor` frame. `offsets[s]` is the time of step `s` relative to
/// the anchor, in seconds.
pub fn agent_node_features<'t>(
    steps: &[(StateValues<'t>, Vec<bool>)],
    anchor: &PoseValues<'t>,
    offsets: &[f64],
    statics: &AgentStatics,
) -> (Value<'t>, Vec<bool>) {
    let n = statics.len();
    let t_len = steps.len();
    let tape = anchor.x.tape();
    let mut fixed = Tensor::zeros(&[n, 2 + AgentKind::COUNT]);
    for i in 0..n {
        let row = &mut fixed.data_mut()[i * (2 + AgentKind::COUNT)..][..2 + AgentKind::COUNT];
        row[0] = statics.length[i];
        row[1] = statics.width[i];
        row[2 + statics.kind[i].index()] = 1.0;
    }
    let fixed = tape.constant(fixed);
    let mut cols = Vec::with_capacity(t_len);
    let mut node_valid = vec![false; n * t_len];
    for (s, (st, valid)) in steps.iter().enumerate() {
        let rel = relative_pose_values(anchor, &st.poses());
        let (c, sn) = (rel.theta.cos(), rel.theta.sin());
        let mut flags = Tensor::zeros(&[n, 2]);
        for i in 0..n {
            flags.data_mut()[i * 2] = if valid[i] { 1.0 } else { 0.0 };
            flags.data_mut()[i * 2 + 1] = offsets[s];
            node_valid[i * t_len + s] = valid[i];
        }
        let col = |v: Value<'t>| v.reshape(&[n, 1]);
        cols.push(concat_last(&[
            col(rel.x),
            col(rel.y),
            col(c),
            col(sn),
            col(st.v * c),
            col(st.v * sn),
            fixed,
            tape.constant(flags),
        ]));
    }
    let nodes = concat_last(&cols).reshape(&[n, t_len, AGENT_NODE_DIM]);
    (nodes, node_valid)
}

/// Agent tokens for the logged window `[t-10, t]`, posed at step `t`.
pub fn tokenize_agents<'t>(tape: &'t Tape, scenario: &Scenario, t: usize) -> AgentTokens<'t> {
    let agents = scenario.select_agents(AGENT_BUDGET);
    let statics = AgentStatics::from_scenario(scenario, &agents);
    let steps: Vec<(StateValues<'t>, Vec<bool>)> = (0..HISTORY)
        .map(|s| match (t + s).checked_sub(HISTORY - 1) {
            Some(step) => gt_step_states(tape, scenario, &agents, step),
            None => (StateValues::constant(tape, &vec![AgentState::default(); agents.len()]), vec![false; agents.len()]),
        })
        .collect();
    let (current, valid) = steps[HISTORY - 1].clone();
    let offsets: Vec<f64> = (0..HISTORY).map(|s| (s as f64 - (HISTORY - 1) as f64) * scenario.dt).collect();
    let (nodes, node_valid) = agent_node_features(&steps, &current.poses(), &offsets, &statics);
    AgentTokens {
        nodes,
        node_valid,
        poses: current.poses(),
        valid,
    }
}

/// Shared per-node MLP followed by a masked max over nodes.
#[derive(Clone, Debug)]
pub struct PointNet {
    pub fc_in: Linear,
    pub ln: LayerNorm,
    pub fc_out: Linear,
}

impl PointNet {
    pub fn new(store: &mut ParamStore, name: &str, d_raw: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc_in: Linear::new(store, &format!("{name}.fc_in"), d_raw, hidden, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), hidden),
            fc_out: Linear::new(store, &format!("{name}.fc_out"), hidden, hidden, rng),
        }
    }

    /// `[N, n, d_raw]` to `[N, hidden]`. Tokens without a valid node come
    /// out as zero rows and are reported invalid.
    pub fn forward<'t>(&self, ctx: Ctx<'t>, nodes: Value<'t>, node_valid: &[bool]) -> (Value<'t>, Vec<bool>) {
        let (n, k) = (nodes.dim(0), nodes.dim(1));
        let h = self.fc_in.forward(ctx, nodes);
        let h = self.fc_out.forward(ctx, self.ln.forward(ctx, h).relu());
        let valid = (0..n).map(|i| node_valid[i * k..(i + 1) * k].iter().any(|v| *v)).collect();
        (h.masked_max_pool(node_valid), valid)
    }
}
