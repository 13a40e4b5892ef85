//! The assembled policy: encoder, personality and destination heads, and the
//! action head, plus the per-scenario data shared by training and inference.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::cvae::{condition, destination_eligible, gt_destinations, CvaeParams};
use crate::dynamics::{squash_actions, AgentState, KindParams, StateValues};
use crate::encoder::{encode_agents, encode_traffic_lights, EncoderParams, SceneStatic};
use crate::knarpe::PosedTokens;
use crate::numcore::{checkpoint, Ctx, Linear, Mlp, NumError, ParamStore, Tensor, Value};
use crate::scene::{agent_node_features, AgentStatics, AgentTokens, Scenario, SceneError, HISTORY};

/// Last step of the observed history; simulation starts from here.
pub const CURRENT: usize = HISTORY - 1;

#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: EncoderParams,
    pub cvae: CvaeParams,
    pub policy: Mlp,
}

#[derive(Clone, Debug)]
pub struct TrafficBots {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

impl TrafficBots {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::new(&mut store, &config, &mut rng);
        let cvae = CvaeParams::new(&mut store, &config, &mut rng);
        // The action head starts at zero so an untrained policy holds speed and heading.
        let policy = Mlp {
            fc1: Linear::new(&mut store, "policy.fc1", config.hidden, config.hidden, &mut rng),
            fc2: Linear::zeroed(&mut store, "policy.fc2", config.hidden, 2),
        };
        Self {
            config,
            store,
            net: Network { encoder, cvae, policy },
        }
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), NumError> {
        checkpoint::save(path, &self.records())
    }

    /// Builds the network for `config` and fills it from a checkpoint.
    /// Records outside the model (optimizer state) are ignored.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self, NumError> {
        let mut model = Self::new(config, 0);
        let records = checkpoint::load(path)?.into_iter().filter(|(n, _)| !is_aux_record(n)).collect();
        model.store.load_named(records)?;
        Ok(model)
    }
}

/// Checkpoint records that carry trainer state rather than weights.
pub fn is_aux_record(name: &str) -> bool {
    name.starts_with("adam.") || name.starts_with("trainer.")
}

/// Per-scenario data that does not depend on the parameters.
#[derive(Clone, Debug)]
pub struct Episode<'s> {
    pub scenario: &'s Scenario,
    /// Scenario agent indices that are simulated: selected by the budget and
    /// valid at the current step.
    pub agents: Vec<usize>,
    pub statics: AgentStatics,
    pub limits: Vec<KindParams>,
    pub scene: SceneStatic,
    pub eligible: Vec<bool>,
    /// `gt[t][i]`, zeroed where invalid.
    pub gt: Vec<Vec<AgentState>>,
    pub gt_valid: Vec<Vec<bool>>,
    pub dest_labels: Vec<usize>,
}

impl<'s> Episode<'s> {
    pub fn new(scenario: &'s Scenario, cfg: &ModelConfig) -> Result<Self, SceneError> {
        let infeasible = |field: &str, message: &str| SceneError::Invalid {
            field: field.into(),
            message: message.into(),
        };
        if scenario.episode_len <= HISTORY {
            return Err(infeasible("episode_len", "episode has no steps after the observed history"));
        }
        let agents: Vec<usize> = scenario
            .select_agents(crate::scene::AGENT_BUDGET)
            .into_iter()
            .filter(|&i| scenario.agents[i].states[CURRENT].valid)
            .collect();
        if agents.is_empty() {
            return Err(infeasible("agents", "no agent is valid at the last observed step"));
        }
        let scene = SceneStatic::new(scenario, cfg);
        if scene.map.is_empty() {
            return Err(infeasible("map", "map has no polyline with positive length"));
        }
        let statics = AgentStatics::from_scenario(scenario, &agents);
        let limits = statics.kind.iter().map(|k| *cfg.kinds.get(*k)).collect();
        let eligible = destination_eligible(&scene.map);
        let dest_labels = gt_destinations(scenario, &agents, &scene.map, &eligible)
            .into_iter()
            .map(|d| d.expect("agent valid at the current step"))
            .collect();
        let mut gt = Vec::with_capacity(scenario.episode_len);
        let mut gt_valid = Vec::with_capacity(scenario.episode_len);
        for t in 0..scenario.episode_len {
            let (s, v): (Vec<AgentState>, Vec<bool>) = agents
                .iter()
                .map(|&i| {
                    let a = &scenario.agents[i];
                    let r = &a.states[t];
                    let z = a.z.unwrap_or(0.0);
                    if r.valid {
                        (AgentState::from_record(r, z), true)
                    } else {
                        (AgentState { z, ..AgentState::default() }, false)
                    }
                })
                .unzip();
            gt.push(s);
            gt_valid.push(v);
        }
        Ok(Self {
            scenario,
            agents,
            statics,
            limits,
            scene,
            eligible,
            gt,
            gt_valid,
            dest_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.scenario.episode_len
    }

    pub fn max_speed(&self) -> Vec<f64> {
        self.limits.iter().map(|p| p.max_speed).collect()
    }

    pub fn controlled(&self) -> Vec<bool> {
        self.agents.iter().map(|&i| self.scenario.agents[i].controlled).collect()
    }
}

/// One entry per step in the policy's input window.
pub type Window<'t> = Vec<(StateValues<'t>, Vec<bool>)>;

impl TrafficBots {
    /// Agent features at step `t` from the last `HISTORY` entries of `window`.
    pub fn encode_step<'t>(
        &self,
        ctx: Ctx<'t>,
        ep: &Episode,
        map: &PosedTokens<'t>,
        window: &[(StateValues<'t>, Vec<bool>)],
        t: usize,
    ) -> PosedTokens<'t> {
        let window = &window[window.len().saturating_sub(HISTORY)..];
        let (current, valid) = window.last().expect("non-empty window").clone();
        let anchor = current.poses();
        let offsets: Vec<f64> = (0..window.len())
            .map(|s| (s as f64 - (window.len() - 1) as f64) * ep.scenario.dt)
            .collect();
        let (nodes, node_valid) = agent_node_features(window, &anchor, &offsets, &ep.statics);
        let tokens = AgentTokens {
            nodes,
            node_valid,
            poses: anchor,
            valid,
        };
        let tl = encode_traffic_lights(ctx, &self.net.encoder, &ep.scene, map, t);
        encode_agents(ctx, &self.net.encoder, &self.config, &tokens, map, &tl)
    }

    /// Mean action of the conditioned policy, bounded per agent kind.
    pub fn act<'t>(
        &self,
        ctx: Ctx<'t>,
        ep: &Episode,
        agents: &PosedTokens<'t>,
        z: Value<'t>,
        dest: &[usize],
        map: &PosedTokens<'t>,
    ) -> (Value<'t>, Value<'t>) {
        let h = condition(ctx, &self.net.cvae, &self.config, agents, z, dest, map);
        squash_actions(self.net.policy.forward(ctx, h), &ep.limits)
    }
}
