//! Diagonal Gaussians and categoricals on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{NumError, Tape, Tensor, Value};

/// Row-wise diagonal Gaussian: `mean` and `log_std` are both `[N, d]`.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'t> {
    pub mean: Value<'t>,
    pub log_std: Value<'t>,
}

impl<'t> DiagGaussian<'t> {
    pub fn new(mean: Value<'t>, log_std: Value<'t>) -> Result<Self, NumError> {
        if mean.shape() != log_std.shape() {
            return Err(NumError::Shape {
                op: "diag_gaussian",
                lhs: mean.shape(),
                rhs: log_std.shape(),
            });
        }
        Ok(Self { mean, log_std })
    }

    /// `N(0, I)` with `n` rows of dimension `dim`, no parameters.
    pub fn standard(tape: &'t Tape, n: usize, dim: usize) -> Self {
        Self {
            mean: tape.zeros(&[n, dim]),
            log_std: tape.zeros(&[n, dim]),
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.mean.dim(1)
    }

    /// `mean + exp(log_std) ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
    pub fn rsample(&self, rng: &mut ChaCha8Rng) -> Value<'t> {
        let shape = self.mean.shape();
        let eps: Vec<f64> = (0..self.mean.numel()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = self.mean.tape().constant(Tensor::new(shape, eps).expect("eps shape"));
        self.mean + self.log_std.exp() * eps
    }
}

/// Closed-form `KL(post ‖ prior)` summed over the last axis, one value per row.
pub fn kl_diag_gaussian<'t>(post: &DiagGaussian<'t>, prior: &DiagGaussian<'t>) -> Result<Value<'t>, NumError> {
    if post.mean.shape() != prior.mean.shape() {
        return Err(NumError::Shape {
            op: "kl_diag_gaussian",
            lhs: post.mean.shape(),
            rhs: prior.mean.shape(),
        });
    }
    let var_ratio = (post.log_std - prior.log_std).scale(2.0).exp();
    let mahal = (post.mean - prior.mean).square() / prior.log_std.scale(2.0).exp();
    let per_dim = (var_ratio + mahal).scale(0.5) - (post.log_std - prior.log_std) - 0.5;
    Ok(per_dim.sum_last())
}

/// Reparameterised sample of `dist`.
pub fn reparameterize<'t>(dist: &DiagGaussian<'t>, rng: &mut ChaCha8Rng) -> Value<'t> {
    dist.rsample(rng)
}

/// Row-wise categorical over the last axis of `logits: [A, M]`. Masked
/// entries (see [`super::MASK_VALUE`]) have zero probability.
#[derive(Clone, Copy, Debug)]
pub struct Categorical<'t> {
    pub logits: Value<'t>,
}

impl<'t> Categorical<'t> {
    pub fn new(logits: Value<'t>) -> Self {
        Self { logits }
    }

    pub fn probs(&self) -> Value<'t> {
        self.logits.softmax()
    }

    /// Cross entropy against one label per row, `[A]`.
    pub fn nll(&self, labels: &[usize]) -> Value<'t> {
        self.logits.nll(labels)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let probs = self.probs().tensor();
        let m = probs.shape()[1];
        probs
            .data()
            .chunks(m)
            .map(|row| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last_valid = 0;
                for (i, p) in row.iter().enumerate() {
                    if *p > 0.0 {
                        last_valid = i;
                        acc += p;
                        if u < acc {
                            return i;
                        }
                    }
                }
                last_valid
            })
            .collect()
    }

    pub fn argmax(&self) -> Vec<usize> {
        let probs = self.probs().tensor();
        let m = probs.shape()[1];
        probs
            .data()
            .chunks(m)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0
            })
            .collect()
    }
}
