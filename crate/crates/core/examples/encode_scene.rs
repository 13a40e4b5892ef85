//! Runs the hierarchical encoder on one scenario: map, then traffic lights,
//! then agents. The map pass is cached and reused across steps.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trafficbots::config::ModelConfig;
use trafficbots::encoder::{encode_agents, encode_map, encode_traffic_lights, EncoderParams, MapCache, SceneStatic};
use trafficbots::numcore::{Ctx, ParamStore, Tape};
use trafficbots::scene::{generate_synthetic, tokenize_agents, Family, SynthSpec};

fn main() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let enc = EncoderParams::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let s = generate_synthetic(3, &SynthSpec::new(Family::Intersection, 16)).expect("generate");
    let st = SceneStatic::new(&s, &cfg);
    println!("{} parameters; {} map tokens, {} traffic lights", store.num_scalars(), st.map.len(), st.tls.len());

    let start = Instant::now();
    let cache = MapCache::build(&store, &enc, &st);
    println!("map pass {:.1} ms (key {:016x})", start.elapsed().as_secs_f64() * 1e3, cache.key);

    for t in [0, 5, 10] {
        let start = Instant::now();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let map = cache.tokens(&tape);
        let tl = encode_traffic_lights(ctx, &enc, &st, &map, t);
        let agents = encode_agents(ctx, &enc, &cfg, &tokenize_agents(&tape, &s, t), &map, &tl);
        let f = agents.features.tensor();
        println!(
            "t={t:2}: agent features {:?}, {} valid, {:.1} ms",
            f.shape(),
            agents.valid.iter().filter(|v| **v).count(),
            start.elapsed().as_secs_f64() * 1e3
        );
    }

    let tape = Tape::new();
    let fresh = encode_map(Ctx::new(&tape, &store), &enc, &st).features.tensor();
    println!("cached vs recomputed map features: max diff {:.1e}", fresh.max_abs_diff(&cache.features));
}
