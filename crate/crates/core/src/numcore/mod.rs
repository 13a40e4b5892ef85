//! Differentiable numerical core: dense tensors, a reverse-mode tape, the
//! ops the model needs, distributions, Adam, and checkpoint I/O.

pub mod checkpoint;
pub mod dist;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use dist::{kl_diag_gaussian, reparameterize, Categorical, DiagGaussian};
pub use gradcheck::{grad_check, grad_check_inputs, grad_check_params, GradCheckReport};
pub use nn::{Ctx, LayerNorm, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{concat_last, concat_rows, try_concat_last, try_concat_rows, Gradients, Tape, Value, MASK_VALUE};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests;
