//! Deterministic closed-loop rollouts, scenario sampling with collision
//! filtering, and displacement metrics.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RolloutConfig, RunConfig};
use crate::cvae::{predict_destination, prior_personality};
use crate::dynamics::{apply_override, collide, AgentState, Obb, StateValues};
use crate::encoder::{encode_map, MapCache};
use crate::knarpe::PosedTokens;
use crate::model::{Episode, TrafficBots, CURRENT};
use crate::numcore::{Categorical, Ctx, Tape, Tensor};
use crate::scene::HISTORY;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite state at step {0}")]
    NonFinite(usize),
    #[error("{0}")]
    Io(String),
    #[error("rollout file: {0}")]
    Format(String),
}

/// Where map features come from during a rollout.
#[derive(Clone, Copy)]
pub enum MapSource<'a> {
    Cached(&'a MapCache),
    Recompute,
}

impl MapSource<'_> {
    fn tokens<'t>(&self, ctx: Ctx<'t>, model: &TrafficBots, ep: &Episode) -> PosedTokens<'t> {
        match self {
            MapSource::Cached(c) => c.tokens(ctx.tape),
            MapSource::Recompute => encode_map(ctx, &model.net.encoder, &ep.scene),
        }
    }
}

/// States of every simulated agent at each step from the current step on.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `states[k][i]` is agent `i` at step `CURRENT + 1 + k`.
    pub states: Vec<Vec<AgentState>>,
    pub valid: Vec<Vec<bool>>,
}

fn window_values<'t>(tape: &'t Tape, hist: &[(Vec<AgentState>, Vec<bool>)]) -> Vec<(StateValues<'t>, Vec<bool>)> {
    hist[hist.len().saturating_sub(HISTORY)..]
        .iter()
        .map(|(s, v)| (StateValues::constant(tape, s), v.clone()))
        .collect()
}

/// Destination logits for every agent, scored from the observed history.
pub fn destination_logits(model: &TrafficBots, ep: &Episode, map: MapSource) -> Tensor {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store);
    let map = map.tokens(ctx, model, ep);
    let hist: Vec<(Vec<AgentState>, Vec<bool>)> =
        (0..=CURRENT).map(|t| (ep.gt[t].clone(), ep.gt_valid[t].clone())).collect();
    let agents = model.encode_step(ctx, ep, &map, &window_values(&tape, &hist), CURRENT);
    predict_destination(ctx, &model.net.cvae, agents.features, &map, &ep.eligible).logits.tensor()
}

/// Closed-loop rollout with mean actions. `z` is `[agents, z_dim]` and is
/// held fixed for the whole episode. Uncontrolled agents replay the log.
pub fn rollout_inference(
    model: &TrafficBots,
    ep: &Episode,
    z: &Tensor,
    dest: &[usize],
    map: MapSource,
) -> Result<Trajectory, SimError> {
    let n = ep.len();
    if z.shape() != [n, model.config.z_dim] || dest.len() != n {
        return Err(SimError::Contract(format!(
            "personality {:?} and {} destinations for {n} agents",
            z.shape(),
            dest.len()
        )));
    }
    let tracks: Vec<_> = ep.agents.iter().map(|&i| &ep.scenario.agents[i]).collect();
    let max_speed = ep.max_speed();
    let mut hist: Vec<(Vec<AgentState>, Vec<bool>)> =
        (0..=CURRENT).map(|t| (ep.gt[t].clone(), ep.gt_valid[t].clone())).collect();
    let mut out = Trajectory {
        states: vec![],
        valid: vec![],
    };
    for t in CURRENT..ep.steps() - 1 {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store);
        let map_tokens = map.tokens(ctx, model, ep);
        let window = window_values(&tape, &hist);
        let agents = model.encode_step(ctx, ep, &map_tokens, &window, t);
        let (accel, yaw) = model.act(ctx, ep, &agents, tape.constant(z.clone()), dest, &map_tokens);
        let current = &hist.last().expect("history").0;
        let mut next = window.last().expect("window").0.step(accel, yaw, ep.scenario.dt, &max_speed).to_states(current);
        apply_override(&mut next, current, &tracks, t);
        if next.iter().any(|s| ![s.x, s.y, s.theta, s.v].iter().all(|v| v.is_finite())) {
            return Err(SimError::NonFinite(t + 1));
        }
        let valid: Vec<bool> = tracks.iter().enumerate().map(|(i, a)| a.controlled || ep.gt_valid[t + 1][i]).collect();
        out.states.push(next.clone());
        out.valid.push(valid.clone());
        hist.push((next, valid));
    }
    Ok(out)
}

/// Maximal runs of consecutive colliding steps, counted per agent pair.
pub fn collision_events(states: &[Vec<AgentState>], valid: &[Vec<bool>], sizes: &[(f64, f64)]) -> usize {
    let n = sizes.len();
    let mut colliding = vec![false; n * n];
    let mut events = 0;
    for (step, ok) in states.iter().zip(valid) {
        let boxes: Vec<Obb> = step.iter().zip(sizes).map(|(s, &(l, w))| Obb::new(s.pose(), l, w)).collect();
        for i in 0..n {
            for j in i + 1..n {
                let now = ok[i] && ok[j] && collide(&boxes[i], &boxes[j]);
                if now && !colliding[i * n + j] {
                    events += 1;
                }
                colliding[i * n + j] = now;
            }
        }
    }
    events
}

/// Indices of the `keep` smallest counts, ties to the lower index, in rank order.
pub fn select_least_collisions(counts: &[usize], keep: usize) -> Result<Vec<usize>, SimError> {
    if keep > counts.len() {
        return Err(SimError::Contract(format!("cannot keep {keep} of {} samples", counts.len())));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| (counts[i], i));
    order.truncate(keep);
    Ok(order)
}

/// Mean over agents of the smallest ADE across `rollouts`, each indexed
/// `[agent][step]`. Only steps valid in `valid` count; agents without any
/// valid step are skipped. `None` when no agent has a valid step.
pub fn min_ade(rollouts: &[Vec<Vec<[f64; 2]>>], gt: &[Vec<[f64; 2]>], valid: &[Vec<bool>]) -> Option<f64> {
    let mut total = 0.0;
    let mut agents = 0;
    for (i, g) in gt.iter().enumerate() {
        let steps: Vec<usize> = (0..g.len()).filter(|&k| valid[i][k]).collect();
        if steps.is_empty() {
            continue;
        }
        let ade = |r: &Vec<Vec<[f64; 2]>>| {
            steps.iter().map(|&k| (r[i][k][0] - g[k][0]).hypot(r[i][k][1] - g[k][1])).sum::<f64>() / steps.len() as f64
        };
        total += rollouts.iter().map(ade).fold(f64::INFINITY, f64::min);
        agents += 1;
    }
    (agents > 0).then(|| total / agents as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledRollout {
    pub sample: usize,
    pub z: Vec<Vec<f64>>,
    pub destination: Vec<usize>,
    /// `[agent][step]` as `[x, y, theta, v]`, for steps after the observed history.
    pub trajectories: Vec<Vec<[f64; 4]>>,
    pub collision_events: usize,
}

impl SampledRollout {
    pub fn positions(&self) -> Vec<Vec<[f64; 2]>> {
        self.trajectories.iter().map(|a| a.iter().map(|s| [s[0], s[1]]).collect()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSet {
    pub samples: Vec<SampledRollout>,
    pub selected: Vec<usize>,
}

/// Draws `cfg.samples` personalities and destinations, rolls each out and
/// keeps the `cfg.keep` with the fewest collision events. Sample `k` uses
/// stream `k` of the seeded generator, so results do not depend on workers.
pub fn sample_and_filter(model: &TrafficBots, ep: &Episode, cfg: &RolloutConfig) -> Result<RolloutSet, SimError> {
    if cfg.keep > cfg.samples {
        return Err(SimError::Contract(format!("keep ({}) exceeds samples ({})", cfg.keep, cfg.samples)));
    }
    let cache = cfg.cache_map.then(|| MapCache::build(&model.store, &model.net.encoder, &ep.scene));
    let source = match &cache {
        Some(c) => MapSource::Cached(c),
        None => MapSource::Recompute,
    };
    let logits = destination_logits(model, ep, source);
    let sizes: Vec<(f64, f64)> = ep.statics.length.iter().copied().zip(ep.statics.width.iter().copied()).collect();
    let run = |k: usize| -> Result<SampledRollout, SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let tape = Tape::new();
        let z = prior_personality(&tape, ep.len(), model.config.z_dim).rsample(&mut rng).tensor();
        let dest_dist = Categorical::new(tape.constant(logits.clone()));
        let destination = if cfg.greedy_destination {
            dest_dist.argmax()
        } else {
            dest_dist.sample(&mut rng)
        };
        let traj = rollout_inference(model, ep, &z, &destination, source)?;
        let d = model.config.z_dim;
        Ok(SampledRollout {
            sample: k,
            z: z.data().chunks(d).map(<[f64]>::to_vec).collect(),
            destination,
            trajectories: (0..ep.len())
                .map(|i| traj.states.iter().map(|s| [s[i].x, s[i].y, s[i].theta, s[i].v]).collect())
                .collect(),
            collision_events: collision_events(&traj.states, &traj.valid, &sizes),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| SimError::Contract(e.to_string()))?;
    let samples: Vec<SampledRollout> =
        pool.install(|| (0..cfg.samples).into_par_iter().map(run).collect::<Result<_, _>>())?;
    let counts: Vec<usize> = samples.iter().map(|s| s.collision_events).collect();
    let selected = select_least_collisions(&counts, cfg.keep)?;
    Ok(RolloutSet { samples, selected })
}

/// Logged positions and validity for the simulated part of the episode.
pub fn ground_truth(ep: &Episode) -> (Vec<Vec<[f64; 2]>>, Vec<Vec<bool>>) {
    let steps = CURRENT + 1..ep.steps();
    let pos = (0..ep.len())
        .map(|i| steps.clone().map(|t| [ep.gt[t][i].x, ep.gt[t][i].y]).collect())
        .collect();
    let valid = (0..ep.len()).map(|i| steps.clone().map(|t| ep.gt_valid[t][i]).collect()).collect();
    (pos, valid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub min_ade: Option<f64>,
    pub collision_events: Vec<usize>,
    pub selected: Vec<usize>,
}

/// On-disk rollout output: the selected samples, metrics over all samples,
/// and the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutFile {
    pub version: u32,
    pub scenario_id: Option<String>,
    pub dt: f64,
    pub first_step: usize,
    pub agent_ids: Vec<u64>,
    pub samples: Vec<SampledRollout>,
    pub metrics: RolloutMetrics,
    pub config: RunConfig,
}

impl RolloutFile {
    /// Worker counts are reset in the embedded config since they do not
    /// change results and outputs must not depend on them.
    pub fn new(ep: &Episode, set: &RolloutSet, mut config: RunConfig) -> Self {
        config.rollout.workers = 1;
        config.train.workers = 1;
        let chosen: Vec<SampledRollout> = set.selected.iter().map(|&k| set.samples[k].clone()).collect();
        let (gt, valid) = ground_truth(ep);
        let positions: Vec<_> = chosen.iter().map(SampledRollout::positions).collect();
        Self {
            version: crate::scene::FORMAT_VERSION,
            scenario_id: ep.scenario.id.clone(),
            dt: ep.scenario.dt,
            first_step: CURRENT + 1,
            agent_ids: ep.agents.iter().map(|&i| ep.scenario.agents[i].id).collect(),
            metrics: RolloutMetrics {
                min_ade: min_ade(&positions, &gt, &valid),
                collision_events: set.samples.iter().map(|s| s.collision_events).collect(),
                selected: set.selected.clone(),
            },
            samples: chosen,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rollout serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_json()).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| SimError::Format(e.to_string()))
    }
}
