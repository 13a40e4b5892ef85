//! Generates one scenario per road family and summarizes its tokens.
//! With a directory argument the scenarios are also written there as JSON.

use std::path::PathBuf;

use trafficbots::scene::{generate_synthetic, tokenize_map, tokenize_traffic_lights, write_scenario, Family, LaneType, SynthSpec};

fn main() {
    let out: Option<PathBuf> = std::env::args().nth(1).map(PathBuf::from);
    for (seed, family) in [Family::Straight, Family::Curve, Family::Intersection].into_iter().enumerate() {
        let s = generate_synthetic(seed as u64, &SynthSpec::new(family, 10)).expect("generate");
        let map = tokenize_map(&s);
        let tls = tokenize_traffic_lights(&s, &map);
        let lanes = map.lane_type.iter().filter(|t| **t == LaneType::Lane).count();
        println!(
            "{family:<12} agents {:2}  polylines {:3}  map tokens {:3} (lanes {lanes:3})  lights {}  steps {}",
            s.agents.len(),
            s.map.len(),
            map.len(),
            tls.len(),
            s.episode_len
        );
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir).expect("output directory");
            write_scenario(&s, &dir.join(format!("{family}.json"))).expect("write");
        }
    }
}
