//! Named parameter storage shared by the model and the controller.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, Tape, Var};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        Self(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Record the current value of `id` on `tape` as a trainable leaf.
    pub fn leaf(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, self.values[id.0].clone())
    }

    /// Per-parameter gradients in store order (`None` where no gradient flowed).
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.ids().map(|id| grads.param(id)).collect()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Replace every value; shapes must match the existing layout.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> bool {
        if values.len() != self.values.len()
            || values
                .iter()
                .zip(&self.values)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return false;
        }
        self.values = values;
        true
    }

    /// FNV-1a over shapes and raw bits; changes whenever any value changes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for v in &self.values {
            for &d in v.shape() {
                eat(d as u64);
            }
            for &x in v.data() {
                eat(x.to_bits());
            }
        }
        h
    }
}

/// `N(0, std^2)` entries.
pub fn normal_init(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.normal())
}

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual linear-layer default.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| bound * (2.0 * rng.uniform() - 1.0))
}
