//! Personality and destination heads, and the fusion that conditions the
//! policy on them.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::dynamics::{AgentState, StateValues};
use crate::geom::{relative_pose_values, rpe_values};
use crate::knarpe::{knarpe_block, knn_select, KnarpeBlockParams, KnnIndex, PosedTokens};
use crate::numcore::{Categorical, Ctx, DiagGaussian, LayerNorm, Linear, Mlp, ParamStore, Tape, Value};
use crate::scene::{
    agent_node_features, gt_step_states, nearest_map_token, AgentStatics, AgentTokens, LaneType, MapTokens, PointNet,
    Scenario, AGENT_NODE_DIM,
};

const LOG_STD_RANGE: (f64, f64) = (-7.0, 3.0);

#[derive(Clone, Debug)]
pub struct CvaeParams {
    pub post_pointnet: PointNet,
    pub post_blocks: Vec<KnarpeBlockParams>,
    pub post_head: Linear,
    pub dest_query: Linear,
    pub z_mlp: Mlp,
    pub dest_feat: Linear,
    pub dest_pose: Linear,
    pub ln: LayerNorm,
}

impl CvaeParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        Self {
            post_pointnet: PointNet::new(store, "cvae.post_pointnet", AGENT_NODE_DIM, d, rng),
            post_blocks: (0..cfg.posterior_layers)
                .map(|i| KnarpeBlockParams::new(store, &format!("cvae.post_block.{i}"), d, cfg.heads, cfg.ff, cfg.rpe, rng))
                .collect(),
            post_head: Linear::zeroed(store, "cvae.post_head", d, 2 * cfg.z_dim),
            dest_query: Linear::new(store, "cvae.dest_query", d, d, rng),
            z_mlp: Mlp::new(store, "cvae.z_mlp", (cfg.z_dim, d, d), rng),
            dest_feat: Linear::new(store, "cvae.dest_feat", d, d, rng),
            dest_pose: Linear::new(store, "cvae.dest_pose", cfg.rpe.width(), d, rng),
            ln: LayerNorm::new(store, "cvae.ln", d),
        }
    }
}

/// Tokens over the whole logged episode of `agents`, posed at step `current`.
pub fn episode_tokens<'t>(
    tape: &'t Tape,
    scenario: &Scenario,
    agents: &[usize],
    statics: &AgentStatics,
    current: usize,
) -> AgentTokens<'t> {
    let steps: Vec<(StateValues<'t>, Vec<bool>)> =
        (0..scenario.episode_len).map(|t| gt_step_states(tape, scenario, agents, t)).collect();
    let (anchor, valid) = match steps.get(current) {
        Some(s) => s.clone(),
        None => (StateValues::constant(tape, &vec![AgentState::default(); agents.len()]), vec![false; agents.len()]),
    };
    let offsets: Vec<f64> = (0..steps.len()).map(|t| (t as f64 - current as f64) * scenario.dt).collect();
    let (nodes, node_valid) = agent_node_features(&steps, &anchor.poses(), &offsets, statics);
    AgentTokens {
        nodes,
        node_valid,
        poses: anchor.poses(),
        valid,
    }
}

/// Posterior personality from the full logged episode.
pub fn posterior_personality<'t>(
    ctx: Ctx<'t>,
    p: &CvaeParams,
    cfg: &ModelConfig,
    tokens: &AgentTokens<'t>,
    map: &PosedTokens<'t>,
) -> DiagGaussian<'t> {
    let (feats, has_nodes) = p.post_pointnet.forward(ctx, tokens.nodes, &tokens.node_valid);
    let valid: Vec<bool> = tokens.valid.iter().zip(&has_nodes).map(|(a, b)| *a && *b).collect();
    let mut x = PosedTokens::new(feats, tokens.poses.clone(), valid);
    let poses = x.pose_list();
    let to_map = knn_select(&poses, &map.pose_list(), &map.valid, cfg.k_post_map);
    let to_agents = knn_select(&poses, &poses, &x.valid, cfg.k_post_agent);
    let index = KnnIndex::union(&[(&to_map, 0), (&to_agents, map.len())]);
    for block in &p.post_blocks {
        let pool = PosedTokens::concat(&[map, &x]);
        x = knarpe_block(ctx, block, &x, &pool, &index);
    }
    let out = p.post_head.forward(ctx, x.features);
    let z = cfg.z_dim;
    let log_std = out.slice_last(z, z).clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1);
    DiagGaussian::new(out.slice_last(0, z), log_std).expect("matching halves")
}

pub fn prior_personality(tape: &Tape, agents: usize, z_dim: usize) -> DiagGaussian<'_> {
    DiagGaussian::standard(tape, agents, z_dim)
}

/// Map tokens that can serve as destinations: lane centerlines, or every
/// token when the map has no lanes.
pub fn destination_eligible(map: &MapTokens) -> Vec<bool> {
    let lanes: Vec<bool> = map.lane_type.iter().map(|t| *t == LaneType::Lane).collect();
    if lanes.contains(&true) {
        lanes
    } else {
        vec![true; map.len()]
    }
}

/// Bilinear scores of each agent against every eligible map token.
pub fn predict_destination<'t>(
    ctx: Ctx<'t>,
    p: &CvaeParams,
    agent_feats: Value<'t>,
    map: &PosedTokens<'t>,
    eligible: &[bool],
) -> Categorical<'t> {
    let (a, m) = (agent_feats.dim(0), map.len());
    let scale = 1.0 / (p.dest_query.fan_out as f64).sqrt();
    let logits = p.dest_query.forward(ctx, agent_feats).matmul_t(map.features).scale(scale);
    let blocked: Vec<bool> = (0..a * m).map(|i| !(eligible[i % m] && map.valid[i % m])).collect();
    Categorical::new(logits.mask_fill(&blocked))
}

/// Eligible map token nearest the last valid logged position of each agent.
pub fn gt_destinations(scenario: &Scenario, agents: &[usize], map: &MapTokens, eligible: &[bool]) -> Vec<Option<usize>> {
    agents
        .iter()
        .map(|&i| {
            let a = &scenario.agents[i];
            let r = &a.states[a.last_valid()?];
            nearest_map_token(map, [r.x, r.y], |m| eligible[m])
        })
        .collect()
}

/// `LN(agent + MLP(z) + W d + W' rpe(agent -> d))` for destination token `d`.
pub fn condition<'t>(
    ctx: Ctx<'t>,
    p: &CvaeParams,
    cfg: &ModelConfig,
    agents: &PosedTokens<'t>,
    z: Value<'t>,
    dest: &[usize],
    map: &PosedTokens<'t>,
) -> Value<'t> {
    let goal = map.features.gather_rows(dest);
    let rel = relative_pose_values(&agents.poses, &map.poses.gather(dest));
    let fused = agents.features
        + p.z_mlp.forward(ctx, z)
        + p.dest_feat.forward(ctx, goal)
        + p.dest_pose.forward(ctx, rpe_values(&rel, &cfg.rpe));
    p.ln.forward(ctx, fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_map, EncoderParams, SceneStatic};
    use crate::geom::Pose2D;
    use crate::numcore::{kl_diag_gaussian, Tensor};
    use crate::scene::{generate_synthetic, point_segment_distance, Family, SynthSpec};
    use rand::SeedableRng;

    struct Fixture {
        cfg: ModelConfig,
        store: ParamStore,
        enc: EncoderParams,
        cvae: CvaeParams,
    }

    fn fixture() -> Fixture {
        let cfg = ModelConfig::small();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = EncoderParams::new(&mut store, &cfg, &mut rng);
        let cvae = CvaeParams::new(&mut store, &cfg, &mut rng);
        Fixture { cfg, store, enc, cvae }
    }

    fn posterior(f: &Fixture, s: &Scenario) -> (Tensor, Tensor, f64) {
        let st = SceneStatic::new(s, &f.cfg);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &f.store);
        let map = encode_map(ctx, &f.enc, &st);
        let agents = s.select_agents(64);
        let statics = AgentStatics::from_scenario(s, &agents);
        let tokens = episode_tokens(&tape, s, &agents, &statics, 10);
        let post = posterior_personality(ctx, &f.cvae, &f.cfg, &tokens, &map);
        let prior = prior_personality(&tape, agents.len(), f.cfg.z_dim);
        let kl = kl_diag_gaussian(&post, &prior).unwrap().sum().item();
        (post.mean.tensor(), post.log_std.tensor(), kl)
    }

    #[test]
    fn zero_head_gives_standard_posterior() {
        let f = fixture();
        let s = generate_synthetic(1, &SynthSpec::new(Family::Intersection, 5)).unwrap();
        let (mean, log_std, kl) = posterior(&f, &s);
        assert!(mean.data().iter().chain(log_std.data()).all(|v| *v == 0.0));
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn posterior_finite_for_single_valid_step() {
        let mut f = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = f.cvae.post_head;
        *f.store.get_mut(head.weight) = Tensor::zeros(&[f.cfg.hidden, 2 * f.cfg.z_dim]);
        for v in f.store.get_mut(head.weight).data_mut() {
            *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
        }
        let mut s = generate_synthetic(2, &SynthSpec::new(Family::Straight, 3)).unwrap();
        for (t, r) in s.agents[0].states.iter_mut().enumerate() {
            r.valid = t == 10;
        }
        let (mean, log_std, kl) = posterior(&f, &s);
        assert!(mean.is_finite() && log_std.is_finite() && kl.is_finite());
        assert!(kl > 0.0);
    }

    #[test]
    fn prior_is_standard_and_seeded() {
        let tape = Tape::new();
        let prior = prior_personality(&tape, 3, 16);
        assert!(prior.mean.data().iter().all(|v| *v == 0.0));
        assert!(prior.log_std.data().iter().all(|v| v.exp() == 1.0));
        assert_eq!(kl_diag_gaussian(&prior, &prior).unwrap().sum().item(), 0.0);
        let a = prior.rsample(&mut ChaCha8Rng::seed_from_u64(5)).tensor();
        let b = prior.rsample(&mut ChaCha8Rng::seed_from_u64(5)).tensor();
        assert_eq!(a, b);
    }

    fn flat_map(tape: &Tape, n: usize, valid: Vec<bool>) -> PosedTokens<'_> {
        let poses: Vec<Pose2D> = (0..n).map(|i| Pose2D::new(i as f64, 0.0, 0.0)).collect();
        PosedTokens::with_constant_poses(tape.zeros(&[n, 32]), &poses, valid)
    }

    #[test]
    fn destination_masking_and_uniform_loss() {
        let f = fixture();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &f.store);
        let agent = tape.constant(Tensor::full(&[1, 32], 0.3));
        let one = flat_map(&tape, 6, vec![false, false, true, false, false, false]);
        let probs = predict_destination(ctx, &f.cvae, agent, &one, &[true; 6]).probs().data();
        assert_eq!(probs[2], 1.0);
        assert!(probs.iter().enumerate().all(|(i, p)| i == 2 || *p == 0.0));
        // Zero map features give equal logits over the four eligible tokens.
        let four = flat_map(&tape, 6, vec![true; 6]);
        let eligible = [true, false, true, true, false, true];
        let nll = predict_destination(ctx, &f.cvae, agent, &four, &eligible).nll(&[3]).item();
        assert!((nll - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gt_destination_is_nearest_lane_segment() {
        for seed in 0..5 {
            let s = generate_synthetic(seed, &SynthSpec::new(Family::Intersection, 6)).unwrap();
            let st = SceneStatic::new(&s, &ModelConfig::small());
            let eligible = destination_eligible(&st.map);
            let agents = s.select_agents(64);
            let got = gt_destinations(&s, &agents, &st.map, &eligible);
            for (&i, g) in agents.iter().zip(&got) {
                let r = &s.agents[i].states[s.agents[i].last_valid().unwrap()];
                let dist = |m: usize| {
                    st.map.points[m]
                        .windows(2)
                        .map(|w| point_segment_distance([r.x, r.y], w[0], w[1]))
                        .fold(f64::INFINITY, f64::min)
                };
                let best = (0..st.map.len())
                    .filter(|m| st.map.lane_type[*m] == LaneType::Lane)
                    .map(dist)
                    .fold(f64::INFINITY, f64::min);
                let g = g.unwrap();
                assert_eq!(st.map.lane_type[g], LaneType::Lane);
                assert!((dist(g) - best).abs() < 1e-12);
            }
        }
    }

    fn conditioned(f: &Fixture, s: &Scenario, z: &Tensor) -> Tensor {
        let st = SceneStatic::new(s, &f.cfg);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &f.store);
        let map = encode_map(ctx, &f.enc, &st);
        let agents = crate::scene::tokenize_agents(&tape, s, 10);
        let feats = f.enc.agent_pointnet.forward(ctx, agents.nodes, &agents.node_valid).0;
        let tokens = PosedTokens::new(feats, agents.poses.clone(), agents.valid.clone());
        let idx = s.select_agents(64);
        let eligible = destination_eligible(&st.map);
        let dest: Vec<usize> = gt_destinations(s, &idx, &st.map, &eligible).into_iter().map(Option::unwrap).collect();
        condition(ctx, &f.cvae, &f.cfg, &tokens, tape.constant(z.clone()), &dest, &map).tensor()
    }

    #[test]
    fn conditioning_responds_to_z_and_is_rigid_invariant() {
        let f = fixture();
        let s = generate_synthetic(4, &SynthSpec::new(Family::Curve, 2)).unwrap();
        let z0 = Tensor::zeros(&[2, f.cfg.z_dim]);
        let mut z1 = z0.clone();
        z1.data_mut()[0] = 1.0;
        let a = conditioned(&f, &s, &z0);
        let b = conditioned(&f, &s, &z1);
        let row = |t: &Tensor, r: usize| t.data()[r * 32..(r + 1) * 32].to_vec();
        assert_ne!(row(&a, 0), row(&b, 0));
        assert_eq!(row(&a, 1), row(&b, 1));
        let moved = conditioned(&f, &s.transformed(&Pose2D::new(50.0, -20.0, -1.1)), &z1);
        assert!(moved.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn zero_z_path_leaves_only_destination_context() {
        let mut f = fixture();
        for l in [f.cvae.z_mlp.fc1, f.cvae.z_mlp.fc2] {
            for id in [l.weight, l.bias] {
                let shape = f.store.get(id).shape().to_vec();
                *f.store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let s = generate_synthetic(6, &SynthSpec::new(Family::Straight, 2)).unwrap();
        let z = Tensor::zeros(&[2, f.cfg.z_dim]);
        let mut z1 = z.clone();
        z1.data_mut()[3] = 2.0;
        let base = conditioned(&f, &s, &z);
        assert_eq!(conditioned(&f, &s, &z1), base);
        for l in [f.cvae.dest_feat, f.cvae.dest_pose] {
            for id in [l.weight, l.bias] {
                let shape = f.store.get(id).shape().to_vec();
                *f.store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        assert!(conditioned(&f, &s, &z).max_abs_diff(&base) > 1e-6);
    }
}
