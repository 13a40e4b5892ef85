use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NumError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    /// Uniform Glorot initialisation for a `[fan_in, fan_out]` weight.
    pub fn glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrites every parameter from `(name, tensor)` records. Names and
    /// shapes must match this store exactly.
    pub fn load_named(&mut self, records: Vec<(String, Tensor)>) -> Result<(), NumError> {
        let mut seen = vec![false; self.names.len()];
        let mut unknown = Vec::new();
        for (name, t) in records {
            match self.by_name.get(&name) {
                Some(&i) => {
                    if self.tensors[i].shape() != t.shape() {
                        return Err(NumError::Checkpoint(format!(
                            "tensor {name}: checkpoint shape {:?} does not match model shape {:?}",
                            t.shape(),
                            self.tensors[i].shape()
                        )));
                    }
                    self.tensors[i] = t;
                    seen[i] = true;
                }
                None => unknown.push(name),
            }
        }
        if !unknown.is_empty() {
            return Err(NumError::Checkpoint(format!("unknown tensors in checkpoint: {}", unknown.join(", "))));
        }
        let missing: Vec<&str> = self
            .names
            .iter()
            .zip(&seen)
            .filter(|(_, s)| !**s)
            .map(|(n, _)| n.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(NumError::Checkpoint(format!("tensors missing from checkpoint: {}", missing.join(", "))));
        }
        Ok(())
    }
}
