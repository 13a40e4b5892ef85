//! Closed-loop behavior cloning: auto-regressive rollouts with full BPTT,
//! scheduled teacher forcing and prior/posterior personality mixing.

use std::fs::OpenOptions;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ModelConfig, TrainConfig};
use crate::cvae::{episode_tokens, posterior_personality, predict_destination, prior_personality};
use crate::dynamics::StateValues;
use crate::encoder::encode_map;
use crate::model::{is_aux_record, Episode, TrafficBots, Window, CURRENT};
use crate::numcore::{checkpoint, kl_diag_gaussian, Adam, Categorical, Ctx, DiagGaussian, NumError, Tape, Tensor, Value};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("no training scenarios")]
    NoData,
}

/// Share of agents fed logged states, decaying linearly to zero.
pub fn tf_fraction(progress: f64, start: f64) -> f64 {
    start * (1.0 - progress.clamp(0.0, 1.0))
}

/// Random choices fixed for one training episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePlan {
    pub use_prior: bool,
    pub forced: Vec<bool>,
}

impl EpisodePlan {
    pub fn draw(rng: &mut ChaCha8Rng, agents: usize, tf_frac: f64, prior_frac: f64) -> Self {
        let use_prior = rng.random_bool(prior_frac);
        let k = ((tf_frac * agents as f64).round() as usize).min(agents);
        let mut forced = vec![false; agents];
        for i in sample(rng, agents, k) {
            forced[i] = true;
        }
        Self { use_prior, forced }
    }

    pub fn closed_loop(agents: usize) -> Self {
        Self {
            use_prior: false,
            forced: vec![false; agents],
        }
    }
}

/// Everything the loss needs from one training rollout.
pub struct TrainForward<'t> {
    /// Predicted states for steps `CURRENT + 1 ..`.
    pub pred: Vec<StateValues<'t>>,
    pub post: DiagGaussian<'t>,
    pub prior: DiagGaussian<'t>,
    pub dest: Categorical<'t>,
}

/// How the personality is obtained for a rollout.
pub enum Personality {
    Sample,
    PosteriorMean,
}

/// Rolls the policy from the observed history to the end of the episode on
/// one tape, conditioned on the logged destinations.
pub fn rollout_train<'t>(
    ctx: Ctx<'t>,
    model: &TrafficBots,
    ep: &Episode,
    plan: &EpisodePlan,
    personality: Personality,
    rng: &mut ChaCha8Rng,
) -> TrainForward<'t> {
    let tape = ctx.tape;
    let cfg = &model.config;
    let n = ep.len();
    let map = encode_map(ctx, &model.net.encoder, &ep.scene);
    let tokens = episode_tokens(tape, ep.scenario, &ep.agents, &ep.statics, CURRENT);
    let post = posterior_personality(ctx, &model.net.cvae, cfg, &tokens, &map);
    let prior = prior_personality(tape, n, cfg.z_dim);
    let z = match (personality, plan.use_prior) {
        (Personality::PosteriorMean, _) => post.mean,
        (Personality::Sample, true) => prior.rsample(rng),
        (Personality::Sample, false) => post.rsample(rng),
    };
    let max_speed = ep.max_speed();
    let mut window: Window<'t> = (0..=CURRENT)
        .map(|t| (StateValues::constant(tape, &ep.gt[t]), ep.gt_valid[t].clone()))
        .collect();
    let mut pred = Vec::with_capacity(ep.steps() - CURRENT - 1);
    let mut dest = None;
    for t in CURRENT..ep.steps() - 1 {
        let agents = model.encode_step(ctx, ep, &map, &window, t);
        if t == CURRENT {
            dest = Some(predict_destination(ctx, &model.net.cvae, agents.features, &map, &ep.eligible));
        }
        let (accel, yaw) = model.act(ctx, ep, &agents, z, &ep.dest_labels, &map);
        let next = window.last().expect("window").0.step(accel, yaw, ep.scenario.dt, &max_speed);
        let take: Vec<bool> = (0..n).map(|i| plan.forced[i] && ep.gt_valid[t + 1][i]).collect();
        let input = next.select(&StateValues::constant(tape, &ep.gt[t + 1]), &take);
        pred.push(next);
        window.push((input, vec![true; n]));
        if window.len() > crate::scene::HISTORY {
            window.remove(0);
        }
    }
    TrainForward {
        pred,
        post,
        prior,
        dest: dest.expect("at least one simulated step"),
    }
}

/// Loss components as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub pos: f64,
    pub yaw: f64,
    pub vel: f64,
    pub kl: f64,
    pub dest: f64,
    pub ade: f64,
}

/// Weighted reconstruction, clipped KL and destination NLL. Reconstruction
/// terms average over valid agent-steps.
pub fn loss<'t>(fwd: &TrainForward<'t>, ep: &Episode, cfg: &TrainConfig) -> (Value<'t>, LossTerms) {
    let tape = fwd.post.mean.tape();
    let n = ep.len();
    let mut pos = tape.scalar(0.0);
    let mut yaw = tape.scalar(0.0);
    let mut vel = tape.scalar(0.0);
    let (mut count, mut dist_sum) = (0usize, 0.0);
    for (k, p) in fwd.pred.iter().enumerate() {
        let t = CURRENT + 1 + k;
        let valid = &ep.gt_valid[t];
        let c = valid.iter().filter(|v| **v).count();
        if c == 0 {
            continue;
        }
        count += c;
        let mask = tape.constant(Tensor::from_vec(valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()));
        let g = StateValues::constant(tape, &ep.gt[t]);
        let (gvx, gvy): (Vec<f64>, Vec<f64>) = ep
            .agents
            .iter()
            .map(|&i| {
                let r = &ep.scenario.agents[i].states[t];
                if r.valid {
                    (r.vx, r.vy)
                } else {
                    (0.0, 0.0)
                }
            })
            .unzip();
        let (gvx, gvy) = (tape.vector(gvx), tape.vector(gvy));
        let dp = p.x.smooth_l1(g.x, 1.0) + p.y.smooth_l1(g.y, 1.0);
        pos = pos + (dp * mask).sum();
        yaw = yaw + ((p.theta - g.theta).cos().scale(-1.0).offset(1.0) * mask).sum();
        let (c, s) = (p.theta.cos(), p.theta.sin());
        let dv = (p.v * c).smooth_l1(gvx, 1.0) + (p.v * s).smooth_l1(gvy, 1.0);
        vel = vel + (dv * mask).sum();
        let (px, py, gx, gy) = (p.x.data(), p.y.data(), g.x.data(), g.y.data());
        dist_sum += (0..n).filter(|&i| valid[i]).map(|i| (px[i] - gx[i]).hypot(py[i] - gy[i])).sum::<f64>();
    }
    let denom = count.max(1) as f64;
    let (pos, yaw, vel) = (pos.scale(1.0 / denom), yaw.scale(1.0 / denom), vel.scale(1.0 / denom));
    let kl = kl_diag_gaussian(&fwd.post, &fwd.prior)
        .expect("matching personality shapes")
        .offset(-cfg.free_nats)
        .relu()
        .mean();
    let dest = fwd.dest.nll(&ep.dest_labels).mean();
    let total = pos.scale(cfg.w_pos)
        + yaw.scale(cfg.w_yaw)
        + vel.scale(cfg.w_vel)
        + kl.scale(cfg.w_kl)
        + dest.scale(cfg.w_dest);
    let terms = LossTerms {
        total: total.item(),
        pos: pos.item(),
        yaw: yaw.item(),
        vel: vel.item(),
        kl: kl.item(),
        dest: dest.item(),
        ade: dist_sum / denom,
    };
    (total, terms)
}

/// Closed-loop reconstruction ADE with the posterior mean personality and
/// logged destinations.
pub fn reconstruction_ade(model: &TrafficBots, ep: &Episode) -> f64 {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = rollout_train(
        ctx,
        model,
        ep,
        &EpisodePlan::closed_loop(ep.len()),
        Personality::PosteriorMean,
        &mut rng,
    );
    loss(&fwd, ep, &TrainConfig::default()).1.ade
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub pos: f64,
    pub yaw: f64,
    pub vel: f64,
    pub kl: f64,
    pub dest: f64,
    pub ade: f64,
    pub tf_fraction: f64,
    pub forced_fraction: f64,
    pub prior_episodes: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

struct EpisodeResult {
    grads: Vec<Tensor>,
    terms: LossTerms,
    forced: usize,
    agents: usize,
    prior: bool,
}

pub struct Trainer {
    pub model: TrafficBots,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub step: usize,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(model: TrafficBots, cfg: TrainConfig) -> Self {
        let adam = Adam::new(cfg.adam.clone(), &model.store);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers.max(1))
            .build()
            .expect("thread pool");
        Self {
            model,
            adam,
            cfg,
            step: 0,
            pool,
        }
    }

    /// Independent stream per (step, slot), so results do not depend on scheduling.
    fn rng(&self, slot: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((self.step as u64) << 16) | slot);
        rng
    }

    pub fn progress(&self) -> f64 {
        self.step as f64 / self.cfg.total_steps.max(1) as f64
    }

    pub fn learning_rate(&self) -> f64 {
        self.cfg.adam.lr * (1.0 - self.progress().min(1.0) * (1.0 - self.cfg.lr_final_frac))
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[Episode]) -> Result<StepMetrics, TrainError> {
        if data.is_empty() {
            return Err(TrainError::NoData);
        }
        let mut pick = self.rng(0xffff);
        let batch: Vec<usize> = (0..self.cfg.batch_size).map(|_| pick.random_range(0..data.len())).collect();
        let tf = tf_fraction(self.progress(), self.cfg.tf_start);
        let results: Vec<EpisodeResult> = self.pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let ep = &data[i];
                    let mut rng = self.rng(slot as u64);
                    let plan = EpisodePlan::draw(&mut rng, ep.len(), tf, self.cfg.prior_rollout_frac);
                    let tape = Tape::new();
                    let ctx = Ctx::new(&tape, &self.model.store);
                    let fwd = rollout_train(ctx, &self.model, ep, &plan, Personality::Sample, &mut rng);
                    let (total, terms) = loss(&fwd, ep, &self.cfg);
                    let grads = tape.param_grads(&tape.backward(total), &self.model.store);
                    EpisodeResult {
                        grads,
                        terms,
                        forced: plan.forced.iter().filter(|f| **f).count(),
                        agents: ep.len(),
                        prior: plan.use_prior,
                    }
                })
                .collect()
        });
        let b = results.len() as f64;
        let mut grads = results[0].grads.clone();
        for r in &results[1..] {
            for (g, h) in grads.iter_mut().zip(&r.grads) {
                for (x, y) in g.data_mut().iter_mut().zip(h.data()) {
                    *x += y;
                }
            }
        }
        for g in &mut grads {
            for x in g.data_mut() {
                *x /= b;
            }
        }
        let mean = |f: fn(&LossTerms) -> f64| results.iter().map(|r| f(&r.terms)).sum::<f64>() / b;
        let loss = mean(|t| t.total);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { what: "loss", step: self.step });
        }
        if !grads.iter().all(Tensor::is_finite) {
            return Err(TrainError::NonFinite { what: "gradient", step: self.step });
        }
        let lr = self.learning_rate();
        let grad_norm = self.adam.update(&mut self.model.store, &grads, lr);
        let metrics = StepMetrics {
            step: self.step,
            loss,
            pos: mean(|t| t.pos),
            yaw: mean(|t| t.yaw),
            vel: mean(|t| t.vel),
            kl: mean(|t| t.kl),
            dest: mean(|t| t.dest),
            ade: mean(|t| t.ade),
            tf_fraction: tf,
            forced_fraction: results.iter().map(|r| r.forced).sum::<usize>() as f64
                / results.iter().map(|r| r.agents).sum::<usize>() as f64,
            prior_episodes: results.iter().filter(|r| r.prior).count(),
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Weights, optimizer moments and the step counter.
    pub fn save(&self, path: &Path) -> Result<(), NumError> {
        let mut records = self.model.records();
        let names: Vec<String> = records.iter().map(|(n, _)| n.clone()).collect();
        for (name, (m, v)) in names.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            records.push((format!("adam.m.{name}"), m.clone()));
            records.push((format!("adam.v.{name}"), v.clone()));
        }
        records.push(("adam.step".into(), Tensor::scalar(self.adam.step as f64)));
        records.push(("trainer.step".into(), Tensor::scalar(self.step as f64)));
        checkpoint::save(path, &records)
    }

    pub fn resume(model_cfg: ModelConfig, cfg: TrainConfig, path: &Path) -> Result<Self, NumError> {
        let records = checkpoint::load(path)?;
        let mut t = Self::new(TrafficBots::new(model_cfg, 0), cfg);
        let (aux, weights): (Vec<_>, Vec<_>) = records.into_iter().partition(|(n, _)| is_aux_record(n));
        t.model.store.load_named(weights)?;
        let names: Vec<String> = t.model.store.iter().map(|(n, _)| n.to_string()).collect();
        let find = |key: &str| aux.iter().find(|(n, _)| n == key).map(|(_, v)| v.clone());
        let missing = |key: &str| NumError::Checkpoint(format!("tensor {key} missing from checkpoint"));
        for (i, name) in names.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut t.adam.m[i]), ("adam.v.", &mut t.adam.v[i])] {
                let key = format!("{prefix}{name}");
                *slot = find(&key).ok_or_else(|| missing(&key))?;
            }
        }
        t.adam.step = find("adam.step").ok_or_else(|| missing("adam.step"))?.data()[0] as u64;
        t.step = find("trainer.step").ok_or_else(|| missing("trainer.step"))?.data()[0] as usize;
        Ok(t)
    }
}

/// Appends metric rows to a CSV file, writing the header only once.
pub struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self, TrainError> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| TrainError::Metrics(format!("{}: {e}", path.display())))?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { writer })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<(), TrainError> {
        self.writer.serialize(m).map_err(|e| TrainError::Metrics(e.to_string()))?;
        self.writer.flush().map_err(|e| TrainError::Metrics(e.to_string()))
    }
}
