use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update with `lr` and returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> f64 {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powf(self.step as f64);
        let bc2 = 1.0 - b2.powf(self.step as f64);
        for ((id, g), (m, v)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = store.get_mut(id).data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                p[i] -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + self.config.eps);
            }
        }
        norm
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> f64 {
        let lr = self.config.lr;
        self.update(store, grads, lr)
    }
}
