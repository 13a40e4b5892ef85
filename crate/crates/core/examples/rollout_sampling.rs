//! Samples personalities and destinations for one scenario, rolls each out
//! in closed loop and keeps the samples with the fewest collisions.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trafficbots::config::{ModelConfig, RolloutConfig};
use trafficbots::model::{Episode, TrafficBots};
use trafficbots::scene::{generate_synthetic, Family, SynthSpec};
use trafficbots::simulator::{ground_truth, min_ade, sample_and_filter};

fn main() {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut model = TrafficBots::new(ModelConfig::small(), 0);
    // A fresh action head is all zeros, which would make every sample alike.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = model.net.policy.fc2.weight;
    model.store.get_mut(head).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    let s = generate_synthetic(5, &SynthSpec::new(Family::Intersection, 10)).expect("generate");
    let ep = Episode::new(&s, &model.config).expect("episode");
    let cfg = RolloutConfig {
        samples: 32,
        keep: 8,
        seed: 1,
        workers,
        ..RolloutConfig::default()
    };
    let start = Instant::now();
    let set = sample_and_filter(&model, &ep, &cfg).expect("rollout");
    println!("{} rollouts of {} agents in {:.2}s on {workers} threads", cfg.samples, ep.len(), start.elapsed().as_secs_f64());

    let counts: Vec<usize> = set.samples.iter().map(|r| r.collision_events).collect();
    println!("collision events per sample: {counts:?}");
    println!("kept samples: {:?}", set.selected);
    let (gt, valid) = ground_truth(&ep);
    let kept: Vec<_> = set.selected.iter().map(|&k| set.samples[k].positions()).collect();
    match min_ade(&kept, &gt, &valid) {
        Some(v) => println!("minADE over kept samples: {v:.3} m"),
        None => println!("no valid logged steps to score"),
    }
}
