//! Hierarchical scene encoder: map, then traffic lights, then agents.
//!
//! Map features depend only on the static map, so they are computed once per
//! scenario and reused at every rollout step.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::geom::{Pose2D, PoseValues};
use crate::knarpe::{knarpe_block, knn_select, KnarpeBlockParams, KnnIndex, PosedTokens};
use crate::numcore::{Ctx, Linear, ParamStore, Tape, Tensor};
use crate::scene::{
    tl_node_features, tokenize_map, tokenize_traffic_lights, AgentTokens, MapTokens, PointNet, Scenario, TlTokens,
    AGENT_NODE_DIM, MAP_NODE_DIM, TL_NODE_DIM,
};

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub map_pointnet: PointNet,
    pub map_blocks: Vec<KnarpeBlockParams>,
    pub tl_embed: Linear,
    pub tl_pointnet: PointNet,
    pub tl_blocks: Vec<KnarpeBlockParams>,
    pub agent_pointnet: PointNet,
    pub agent_blocks: Vec<KnarpeBlockParams>,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        let blocks = |store: &mut ParamStore, name: &str, n: usize, rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|i| KnarpeBlockParams::new(store, &format!("{name}.{i}"), d, cfg.heads, cfg.ff, cfg.rpe, rng))
                .collect()
        };
        Self {
            map_pointnet: PointNet::new(store, "enc.map_pointnet", MAP_NODE_DIM, d, rng),
            map_blocks: blocks(store, "enc.map_block", cfg.map_layers, rng),
            tl_embed: Linear::new(store, "enc.tl_embed", TL_NODE_DIM, cfg.tl_embed, rng),
            tl_pointnet: PointNet::new(store, "enc.tl_pointnet", cfg.tl_embed, d, rng),
            tl_blocks: blocks(store, "enc.tl_block", cfg.tl_layers, rng),
            agent_pointnet: PointNet::new(store, "enc.agent_pointnet", AGENT_NODE_DIM, d, rng),
            agent_blocks: blocks(store, "enc.agent_block", cfg.agent_layers, rng),
        }
    }
}

/// Tokens and neighbor tables that stay fixed for a whole scenario.
#[derive(Clone, Debug)]
pub struct SceneStatic {
    pub map: MapTokens,
    pub tls: TlTokens,
    pub map_knn: KnnIndex,
    /// Traffic light to map and traffic light to traffic light, side by side.
    pub tl_knn: KnnIndex,
}

impl SceneStatic {
    pub fn new(scenario: &Scenario, cfg: &ModelConfig) -> Self {
        let map = tokenize_map(scenario);
        let tls = tokenize_traffic_lights(scenario, &map);
        let all_map = vec![true; map.len()];
        let map_knn = knn_select(&map.poses, &map.poses, &all_map, cfg.k_map);
        let tl_map = knn_select(&tls.poses, &map.poses, &all_map, cfg.k_tl_map);
        let tl_tl = knn_select(&tls.poses, &tls.poses, &vec![true; tls.len()], cfg.k_tl_tl);
        let tl_knn = KnnIndex::union(&[(&tl_map, 0), (&tl_tl, map.len())]);
        Self {
            map,
            tls,
            map_knn,
            tl_knn,
        }
    }

    /// Identifies the map content, for keying cached features.
    pub fn map_key(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.map.nodes.shape().hash(&mut h);
        for v in self.map.nodes.data() {
            v.to_bits().hash(&mut h);
        }
        for p in &self.map.poses {
            [p.x, p.y, p.theta].map(f64::to_bits).hash(&mut h);
        }
        h.finish()
    }
}

fn empty_tokens(tape: &Tape, width: usize) -> PosedTokens<'_> {
    PosedTokens::new(tape.zeros(&[0, width]), PoseValues::constant(tape, &[]), vec![])
}

pub fn encode_map<'t>(ctx: Ctx<'t>, p: &EncoderParams, st: &SceneStatic) -> PosedTokens<'t> {
    let d = p.map_pointnet.fc_out.fan_out;
    if st.map.is_empty() {
        return empty_tokens(ctx.tape, d);
    }
    let nodes = ctx.tape.constant(st.map.nodes.clone());
    let (feats, valid) = p.map_pointnet.forward(ctx, nodes, &st.map.node_valid);
    let mut x = PosedTokens::with_constant_poses(feats, &st.map.poses, valid);
    for block in &p.map_blocks {
        x = knarpe_block(ctx, block, &x, &x, &st.map_knn);
    }
    x
}

/// Traffic-light features at step `t`: the controlled lane's map feature
/// plus the embedded state history, refined against map and light neighbors.
pub fn encode_traffic_lights<'t>(
    ctx: Ctx<'t>,
    p: &EncoderParams,
    st: &SceneStatic,
    map: &PosedTokens<'t>,
    t: usize,
) -> PosedTokens<'t> {
    let d = p.tl_pointnet.fc_out.fan_out;
    if st.tls.is_empty() {
        return empty_tokens(ctx.tape, d);
    }
    let (nodes, node_valid) = tl_node_features(&st.tls, t);
    let emb = p.tl_embed.forward(ctx, ctx.tape.constant(nodes));
    let (hist, valid) = p.tl_pointnet.forward(ctx, emb, &node_valid);
    let feats = map.features.gather_rows(&st.tls.map_token) + hist;
    let mut x = PosedTokens::with_constant_poses(feats, &st.tls.poses, valid);
    for block in &p.tl_blocks {
        let pool = PosedTokens::concat(&[map, &x]);
        x = knarpe_block(ctx, block, &x, &pool, &st.tl_knn);
    }
    x
}

/// Neighbor table of agents over the stacked (map, lights, agents) pool.
pub fn agent_knn(
    cfg: &ModelConfig,
    agent_poses: &[Pose2D],
    agent_valid: &[bool],
    map: &PosedTokens<'_>,
    tl: &PosedTokens<'_>,
) -> KnnIndex {
    let to_map = knn_select(agent_poses, &map.pose_list(), &map.valid, cfg.k_agent_map);
    let to_tl = knn_select(agent_poses, &tl.pose_list(), &tl.valid, cfg.k_agent_tl);
    let to_agents = knn_select(agent_poses, agent_poses, agent_valid, cfg.k_agent_agent);
    KnnIndex::union(&[(&to_map, 0), (&to_tl, map.len()), (&to_agents, map.len() + tl.len())])
}

pub fn encode_agents<'t>(
    ctx: Ctx<'t>,
    p: &EncoderParams,
    cfg: &ModelConfig,
    tokens: &AgentTokens<'t>,
    map: &PosedTokens<'t>,
    tl: &PosedTokens<'t>,
) -> PosedTokens<'t> {
    let (feats, has_nodes) = p.agent_pointnet.forward(ctx, tokens.nodes, &tokens.node_valid);
    let valid: Vec<bool> = tokens.valid.iter().zip(&has_nodes).map(|(a, b)| *a && *b).collect();
    let mut x = PosedTokens::new(feats, tokens.poses.clone(), valid);
    let index = agent_knn(cfg, &x.pose_list(), &x.valid, map, tl);
    for block in &p.agent_blocks {
        let pool = PosedTokens::concat(&[map, tl, &x]);
        x = knarpe_block(ctx, block, &x, &pool, &index);
    }
    x
}

/// Map features detached from any tape, keyed by the map they came from.
#[derive(Clone, Debug)]
pub struct MapCache {
    pub key: u64,
    pub features: Tensor,
    pub valid: Vec<bool>,
    pub poses: Vec<Pose2D>,
}

impl MapCache {
    pub fn build(params: &ParamStore, p: &EncoderParams, st: &SceneStatic) -> Self {
        let tape = Tape::new();
        let x = encode_map(Ctx::new(&tape, params), p, st);
        Self {
            key: st.map_key(),
            features: x.features.tensor(),
            valid: x.valid,
            poses: st.map.poses.clone(),
        }
    }

    pub fn tokens<'t>(&self, tape: &'t Tape) -> PosedTokens<'t> {
        PosedTokens::with_constant_poses(tape.constant(self.features.clone()), &self.poses, self.valid.clone())
    }
}
