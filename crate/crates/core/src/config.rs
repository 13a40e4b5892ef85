//! Run configuration, loaded from TOML with every field defaulted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::KindTable;
use crate::geom::RpeConfig;
use crate::numcore::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub rpe: RpeConfig,
    pub map_layers: usize,
    pub tl_layers: usize,
    pub agent_layers: usize,
    pub posterior_layers: usize,
    pub k_map: usize,
    pub k_tl_map: usize,
    pub k_tl_tl: usize,
    pub k_agent_map: usize,
    pub k_agent_tl: usize,
    pub k_agent_agent: usize,
    pub k_post_map: usize,
    pub k_post_agent: usize,
    pub z_dim: usize,
    pub tl_embed: usize,
    pub kinds: KindTable,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            heads: 4,
            ff: 512,
            rpe: RpeConfig::default(),
            map_layers: 2,
            tl_layers: 2,
            agent_layers: 2,
            posterior_layers: 1,
            k_map: 32,
            k_tl_map: 24,
            k_tl_tl: 24,
            k_agent_map: 64,
            k_agent_tl: 25,
            k_agent_agent: 25,
            k_post_map: 32,
            k_post_agent: 16,
            z_dim: 16,
            tl_embed: 16,
            kinds: KindTable::default(),
        }
    }
}

impl ModelConfig {
    /// A narrow model for quick experiments on a single machine.
    pub fn small() -> Self {
        Self {
            hidden: 32,
            heads: 2,
            ff: 64,
            rpe: RpeConfig::new(8, RpeConfig::default().omega).expect("valid rpe"),
            map_layers: 1,
            tl_layers: 1,
            agent_layers: 1,
            k_map: 8,
            k_tl_map: 4,
            k_tl_tl: 4,
            k_agent_map: 12,
            k_agent_tl: 4,
            k_agent_agent: 8,
            k_post_map: 8,
            k_post_agent: 8,
            z_dim: 8,
            tl_embed: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(format!("heads ({}) must divide hidden ({})", self.heads, self.hidden));
        }
        self.rpe.validate().map_err(|e| e.to_string())?;
        let ks = [self.k_map, self.k_tl_map, self.k_tl_tl, self.k_agent_map, self.k_agent_tl, self.k_agent_agent];
        if ks.contains(&0) || self.k_post_map == 0 || self.k_post_agent == 0 {
            return Err("neighbor counts must be at least 1".into());
        }
        if self.z_dim == 0 || self.tl_embed == 0 || self.ff == 0 {
            return Err("z_dim, tl_embed and ff must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub free_nats: f64,
    pub tf_start: f64,
    pub prior_rollout_frac: f64,
    pub w_pos: f64,
    pub w_yaw: f64,
    pub w_vel: f64,
    pub w_kl: f64,
    pub w_dest: f64,
    pub adam: AdamConfig,
    /// Learning rate at the end of training, as a fraction of the start.
    pub lr_final_frac: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_steps: 3000,
            free_nats: 1.0,
            tf_start: 0.30,
            prior_rollout_frac: 0.10,
            w_pos: 1.0,
            w_yaw: 1.0,
            w_vel: 0.5,
            w_kl: 1.0,
            w_dest: 0.5,
            adam: AdamConfig::default(),
            lr_final_frac: 1.0,
            checkpoint_every: 500,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, f) in [("tf_start", self.tf_start), ("prior_rollout_frac", self.prior_rollout_frac)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(format!("{name} must be in [0, 1], got {f}"));
            }
        }
        let ws = [self.w_pos, self.w_yaw, self.w_vel, self.w_kl, self.w_dest, self.free_nats];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err("loss weights and free_nats must be non-negative".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(self.adam.lr > 0.0) || !(self.lr_final_frac > 0.0) {
            return Err("learning rate must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub samples: usize,
    pub keep: usize,
    pub seed: u64,
    pub workers: usize,
    /// Take the most likely destination instead of sampling one.
    pub greedy_destination: bool,
    pub cache_map: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            samples: 128,
            keep: 32,
            seed: 0,
            workers: 1,
            greedy_destination: false,
            cache_map: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_architecture() {
        let m = ModelConfig::default();
        assert_eq!((m.hidden, m.heads, m.ff), (128, 4, 512));
        assert_eq!((m.k_map, m.k_tl_map, m.k_tl_tl), (32, 24, 24));
        assert_eq!((m.k_agent_map, m.k_agent_tl, m.k_agent_agent), (64, 25, 25));
        let t = TrainConfig::default();
        assert_eq!((t.batch_size, t.free_nats, t.tf_start, t.prior_rollout_frac), (8, 1.0, 0.30, 0.10));
        let r = RolloutConfig::default();
        assert_eq!((r.samples, r.keep), (128, 32));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("[model]\nhidden = 64\n[train]\nseed = 9\n").unwrap();
        assert_eq!((partial.model.hidden, partial.model.heads, partial.train.seed), (64, 4, 9));
        assert!(RunConfig::from_toml("[model]\nhiden = 64\n").unwrap_err().contains("hiden"));
        assert!(RunConfig::from_toml("[model]\nhidden = 30\nheads = 4\n").is_err());
    }
}
