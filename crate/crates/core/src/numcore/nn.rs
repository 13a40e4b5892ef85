//! Small parameterised building blocks shared by the model modules.

use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Value};

/// Borrowed view of a parameter store bound to one tape.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub params: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Self { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Value<'t> {
        self.tape.param(self.params, id)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.glorot(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.zeros(format!("{name}.bias"), &[fan_out]),
            fan_in,
            fan_out,
        }
    }

    /// Zero weight and bias; the layer initially outputs zeros.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.zeros(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: store.zeros(format!("{name}.bias"), &[fan_out]),
            fan_in,
            fan_out,
        }
    }

    /// `x: [.., fan_in]` → `[.., fan_out]`.
    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Value<'t>) -> Value<'t> {
        let shape = x.shape();
        let lead: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let flat = if shape.len() == 2 { x } else { x.reshape(&[rows, self.fan_in]) };
        let y = flat.matmul(ctx.p(self.weight)) + ctx.p(self.bias);
        if shape.len() == 2 {
            y
        } else {
            let mut out = lead;
            out.push(self.fan_out);
            y.reshape(&out)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[width]),
            bias: store.zeros(format!("{name}.bias"), &[width]),
        }
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Value<'t>) -> Value<'t> {
        x.layer_norm(ctx.p(self.gain), ctx.p(self.bias))
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, rng),
        }
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, x: Value<'t>) -> Value<'t> {
        self.fc2.forward(ctx, self.fc1.forward(ctx, x).relu())
    }
}
