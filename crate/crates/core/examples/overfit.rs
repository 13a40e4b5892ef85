//! Overfits the policy to one synthetic intersection and reports the
//! closed-loop reconstruction error as training goes.

use std::time::Instant;

use trafficbots::config::{ModelConfig, TrainConfig};
use trafficbots::model::{Episode, TrafficBots};
use trafficbots::scene::{generate_synthetic, Family, SynthSpec};
use trafficbots::trainer::{reconstruction_ade, Trainer};

fn main() {
    let agents: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(6);
    let lr: f64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(3e-3);
    let scenario = generate_synthetic(7, &SynthSpec::new(Family::Intersection, agents)).expect("scenario");
    let model_cfg = ModelConfig::small();
    let mut cfg = TrainConfig {
        batch_size: 1,
        total_steps: 3000,
        seed: 1,
        ..TrainConfig::default()
    };
    cfg.adam.lr = lr;
    let ep = Episode::new(&scenario, &model_cfg).expect("episode");
    let mut trainer = Trainer::new(TrafficBots::new(model_cfg, 0), cfg);
    let start = Instant::now();
    for step in 0..3000 {
        let m = trainer.train_step(std::slice::from_ref(&ep)).expect("step");
        if step % 50 == 0 {
            let ade = reconstruction_ade(&trainer.model, &ep);
            println!(
                "step {step:5} loss {:.4} train_ade {:.3} closed_loop_ade {ade:.3} ({:.0}s)",
                m.loss,
                m.ade,
                start.elapsed().as_secs_f64()
            );
            if ade < 0.5 {
                break;
            }
        }
    }
}
