//! Attention over K nearest neighbors with relative-pose encodings: moving
//! the whole scene rigidly leaves the output unchanged.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trafficbots::geom::{Pose2D, RpeConfig};
use trafficbots::knarpe::{knarpe_block, knn_select, KnarpeBlockParams, PosedTokens};
use trafficbots::numcore::{Ctx, ParamStore, Tape, Tensor};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, hidden, k) = (12, 16, 4);
    let mut store = ParamStore::new();
    let block = KnarpeBlockParams::new(&mut store, "block", hidden, 4, 32, RpeConfig::new(8, 1e-3).unwrap(), &mut rng);
    let poses: Vec<Pose2D> = (0..n)
        .map(|_| Pose2D::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-PI..PI)))
        .collect();
    let feats = Tensor::new(vec![n, hidden], (0..n * hidden).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let run = |poses: &[Pose2D]| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let toks = PosedTokens::with_constant_poses(tape.constant(feats.clone()), poses, vec![true; n]);
        let idx = knn_select(poses, poses, &toks.valid, k);
        (knarpe_block(ctx, &block, &toks, &toks, &idx).features.tensor(), idx)
    };

    let (out, idx) = run(&poses);
    println!("token 0 attends to {:?}", idx.row(0).collect::<Vec<_>>());
    for g in [Pose2D::new(100.0, -40.0, 1.0), Pose2D::new(-3e3, 2e3, -2.5)] {
        let moved: Vec<Pose2D> = poses.iter().map(|p| g.compose(p)).collect();
        let (out2, _) = run(&moved);
        println!("moved by ({:.0}, {:.0}, {:.1}): max output change {:.2e}", g.x, g.y, g.theta, out.max_abs_diff(&out2));
    }
}
