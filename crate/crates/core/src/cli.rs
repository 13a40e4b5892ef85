//! Command-line front end: generate, train, rollout, evaluate.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::model::{Episode, TrafficBots};
use crate::scene::{generate_synthetic, read_scenario, write_scenario, Family, Scenario, SynthSpec};
use crate::simulator::{ground_truth, min_ade, sample_and_filter, RolloutFile, SimError};
use crate::trainer::{MetricsLog, TrainError, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NonFinite(_) => CliError::Numeric(e.to_string()),
            SimError::Contract(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "trafficbots", version, about = "Closed-loop multi-agent traffic simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic scenarios.
    Generate(GenerateArgs),
    /// Train a policy on a directory of scenarios.
    Train(TrainArgs),
    /// Sample, roll out and filter scenarios from a checkpoint.
    Rollout(RolloutArgs),
    /// Score a rollout file against its logged scenario.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "intersection")]
    pub spec: Family,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 12)]
    pub agents: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Metrics CSV; defaults to the checkpoint path with `.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from the checkpoint at `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the config saved next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub greedy_destination: bool,
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub rollout: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Rollout(a) => cmd_rollout(&a),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|r| println!("{}", r.render())),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    fs::create_dir_all(&a.out).map_err(|e| data_err(format!("{}: {e}", a.out.display())))?;
    let spec = SynthSpec::new(a.spec, a.agents);
    for i in 0..a.count {
        let s = generate_synthetic(a.seed.wrapping_add(i as u64), &spec).map_err(|e| CliError::Usage(e.to_string()))?;
        write_scenario(&s, &a.out.join(format!("scenario_{i:05}.json"))).map_err(data_err)?;
    }
    info!("wrote {} scenarios to {}", a.count, a.out.display());
    Ok(())
}

/// Scenario files in `dir`, in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scenario>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(data_err(format!("{}: no scenario files", dir.display())));
    }
    paths
        .iter()
        .map(|p| read_scenario(p).map_err(|e| data_err(format!("{}: {e}", p.display()))))
        .collect()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p).map_err(CliError::Usage),
        None => Ok(RunConfig::default()),
    }
}

/// Effective configuration saved next to a checkpoint.
pub fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.steps {
        cfg.train.total_steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.workers {
        cfg.train.workers = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.adam.lr = v;
    }
    cfg.validate().map_err(CliError::Usage)?;
    let scenarios = load_dataset(&a.data)?;
    let episodes: Vec<Episode> = scenarios
        .iter()
        .map(|s| Episode::new(s, &cfg.model).map_err(data_err))
        .collect::<Result<_, _>>()?;
    let mut trainer = if a.resume {
        Trainer::resume(cfg.model.clone(), cfg.train.clone(), &a.out).map_err(data_err)?
    } else {
        Trainer::new(TrafficBots::new(cfg.model.clone(), cfg.train.seed), cfg.train.clone())
    };
    fs::write(sidecar(&a.out), cfg.to_toml()).map_err(data_err)?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".metrics.csv");
        PathBuf::from(s)
    });
    let mut log = MetricsLog::open(&metrics_path)?;
    let every = cfg.train.checkpoint_every.max(1);
    let mut last = None;
    while trainer.step < cfg.train.total_steps {
        let m = trainer.train_step(&episodes)?;
        log.write(&m)?;
        if trainer.step % 50 == 0 {
            info!("step {} loss {:.4} ade {:.3} lr {:.2e}", m.step, m.loss, m.ade, m.lr);
        }
        if trainer.step % every == 0 {
            trainer.save(&a.out).map_err(data_err)?;
        }
        last = Some(m);
    }
    trainer.save(&a.out).map_err(data_err)?;
    if let Some(m) = last {
        println!("step {} loss {:.6} ade {:.4}", m.step, m.loss, m.ade);
    }
    Ok(())
}

pub fn cmd_rollout(a: &RolloutArgs) -> Result<(), CliError> {
    let side = sidecar(&a.ckpt);
    let cfg_path = a.config.clone().or_else(|| side.exists().then_some(side));
    let mut cfg = load_config(cfg_path.as_deref())?;
    let r = &mut cfg.rollout;
    if let Some(v) = a.seed {
        r.seed = v;
    }
    if let Some(v) = a.samples {
        r.samples = v;
    }
    if let Some(v) = a.keep {
        r.keep = v;
    }
    if let Some(v) = a.workers {
        r.workers = v;
    }
    r.greedy_destination |= a.greedy_destination;
    r.cache_map &= !a.no_cache;
    if r.keep > r.samples || r.keep == 0 {
        return Err(CliError::Usage(format!("--keep must be in 1..={}", r.samples)));
    }
    let model = TrafficBots::load(cfg.model.clone(), &a.ckpt).map_err(data_err)?;
    let scenario = read_scenario(&a.scenario).map_err(data_err)?;
    let ep = Episode::new(&scenario, &cfg.model).map_err(data_err)?;
    let set = sample_and_filter(&model, &ep, &cfg.rollout)?;
    info!("{} samples of {} agents, kept {:?}", set.samples.len(), ep.len(), set.selected);
    RolloutFile::new(&ep, &set, cfg).write(&a.out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenario_id: Option<String>,
    pub agents: usize,
    pub samples: usize,
    pub min_ade: Option<f64>,
    pub collision_events: Vec<usize>,
    pub mean_collision_events: f64,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let ade = self.min_ade.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        format!(
            "scenario: {}\nagents: {}\nsamples: {}\nminADE: {ade}\ncollision events per sample: {:?}\nmean collision events: {:.4}\n{}",
            self.scenario_id.as_deref().unwrap_or("-"),
            self.agents,
            self.samples,
            self.collision_events,
            self.mean_collision_events,
            serde_json::to_string(self).expect("report serializes")
        )
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<EvalReport, CliError> {
    let rollout = RolloutFile::read(&a.rollout)?;
    let scenario = read_scenario(&a.scenario).map_err(data_err)?;
    if rollout.scenario_id != scenario.id {
        return Err(data_err(format!(
            "rollout is for scenario {:?} but {} holds {:?}",
            rollout.scenario_id,
            a.scenario.display(),
            scenario.id
        )));
    }
    let ep = Episode::new(&scenario, &rollout.config.model).map_err(data_err)?;
    let ids: Vec<u64> = ep.agents.iter().map(|&i| scenario.agents[i].id).collect();
    if ids != rollout.agent_ids {
        return Err(data_err("rollout agents do not match the scenario's simulated agents"));
    }
    let (gt, valid) = ground_truth(&ep);
    for s in &rollout.samples {
        if s.trajectories.len() != ids.len() || s.trajectories.iter().any(|t| t.len() != gt[0].len()) {
            return Err(data_err(format!("sample {} has the wrong trajectory shape", s.sample)));
        }
    }
    let positions: Vec<_> = rollout.samples.iter().map(|s| s.positions()).collect();
    let events: Vec<usize> = rollout.samples.iter().map(|s| s.collision_events).collect();
    Ok(EvalReport {
        scenario_id: scenario.id.clone(),
        agents: ids.len(),
        samples: rollout.samples.len(),
        min_ade: if positions.is_empty() {
            None
        } else {
            min_ade(&positions, &gt, &valid)
        },
        mean_collision_events: events.iter().sum::<usize>() as f64 / events.len().max(1) as f64,
        collision_events: events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::simulator::SampledRollout;

    fn args(v: &[&str]) -> Vec<String> {
        std::iter::once("trafficbots").chain(v.iter().copied()).map(String::from).collect()
    }

    #[test]
    fn generate_is_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        for d in [&a, &b] {
            let code = run(args(&["generate", "--out", d.to_str().unwrap(), "--seed", "3", "--spec", "curve", "--count", "2"]));
            assert_eq!(code, 0);
        }
        for name in ["scenario_00000.json", "scenario_00001.json"] {
            let (x, y) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
            assert_eq!(x, y);
            assert!(read_scenario(&a.join(name)).is_ok());
        }
        let empty = dir.path().join("empty");
        assert_eq!(run(args(&["generate", "--out", empty.to_str().unwrap(), "--count", "0"])), 0);
        assert_eq!(fs::read_dir(&empty).unwrap().count(), 0);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(args(&["generate"])), 2);
        assert_eq!(run(args(&["frobnicate"])), 2);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let out = dir.path().join("m.ckpt");
        assert_eq!(run(args(&["train", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()])), 3);
        let cfg = dir.path().join("bad.toml");
        fs::write(&cfg, "[train]\ntf_start = 2.0\n").unwrap();
        let code = run(args(&["train", "--data", missing.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
        assert_eq!(code, 2);
    }

    fn tiny_config(dir: &Path) -> PathBuf {
        let mut cfg = RunConfig {
            model: ModelConfig::small(),
            ..RunConfig::default()
        };
        cfg.train.batch_size = 2;
        cfg.train.checkpoint_every = 2;
        let p = dir.join("run.toml");
        fs::write(&p, cfg.to_toml()).unwrap();
        p
    }

    #[test]
    fn train_resume_rollout_evaluate() {
        let dir = tempfile::tempdir().unwrap();
        let d = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
        assert_eq!(run(args(&["generate", "--out", &d("data"), "--count", "1", "--agents", "3"])), 0);
        let cfg = tiny_config(dir.path());
        let cfg = cfg.to_str().unwrap();
        let (data, ckpt) = (d("data"), d("m.ckpt"));
        let train = |steps: &str, resume: bool| {
            let mut v = vec!["train", "--data", &data, "--config", cfg, "--out", &ckpt, "--steps", steps];
            if resume {
                v.push("--resume");
            }
            run(args(&v))
        };
        assert_eq!(train("3", false), 0);
        assert_eq!(train("5", true), 0);
        let csv = fs::read_to_string(d("m.ckpt.metrics.csv")).unwrap();
        let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(steps, ["0", "1", "2", "3", "4"]);
        assert!(Path::new(&d("m.ckpt.toml")).exists());

        let scen = d("data/scenario_00000.json");
        let roll = |out: &str, workers: &str| {
            run(args(&["rollout", "--ckpt", &d("m.ckpt"), "--scenario", &scen, "--out", &d(out), "--seed", "7", "--samples", "3", "--keep", "2", "--workers", workers]))
        };
        assert_eq!(roll("r1.json", "1"), 0);
        assert_eq!(roll("r2.json", "3"), 0);
        assert_eq!(fs::read(d("r1.json")).unwrap(), fs::read(d("r2.json")).unwrap());
        let file = RolloutFile::read(Path::new(&d("r1.json"))).unwrap();
        assert_eq!(file.samples.len(), 2);

        let report = cmd_evaluate(&EvaluateArgs {
            rollout: d("r1.json").into(),
            scenario: scen.clone().into(),
        })
        .unwrap();
        assert_eq!(report.min_ade, file.metrics.min_ade);

        // The logged future as the only sample scores zero.
        let scenario = read_scenario(Path::new(&scen)).unwrap();
        let ep = Episode::new(&scenario, &file.config.model).unwrap();
        let mut gt_file = file.clone();
        gt_file.samples = vec![SampledRollout {
            trajectories: (0..ep.len())
                .map(|i| (crate::model::CURRENT + 1..ep.steps()).map(|t| {
                    let s = ep.gt[t][i];
                    [s.x, s.y, s.theta, s.v]
                }).collect())
                .collect(),
            ..file.samples[0].clone()
        }];
        gt_file.write(Path::new(&d("gt.json"))).unwrap();
        let report = cmd_evaluate(&EvaluateArgs {
            rollout: d("gt.json").into(),
            scenario: scen.into(),
        })
        .unwrap();
        assert_eq!(report.min_ade, Some(0.0));

        let other = d("other.json");
        let mut s2 = scenario.clone();
        s2.id = Some("elsewhere".into());
        write_scenario(&s2, Path::new(&other)).unwrap();
        assert_eq!(run(args(&["evaluate", "--rollout", &d("r1.json"), "--scenario", &other])), 3);
    }
}
