//! Named parameter collections shared by all trainable models.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, ParamId, Var};
use crate::tensor::Tensor;

/// Ordered set of named tensors. Order is the registration order and is part
/// of a model's identity (checkpoints and checksums depend on it).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.id(name)
            .map(|id| self.tensor(id))
            .ok_or_else(|| Error::state(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Bind a parameter into a graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Var {
        let id = self
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        g.param(id, self.tensor(id).clone())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Order-sensitive FNV-1a checksum over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Uniform init in `[-s, s]` with `s = sqrt(1 / fan_in)`.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let s = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checksum_tracks_values_and_names() {
        let mut a = ParamSet::new();
        a.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut b = ParamSet::new();
        b.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert_eq!(a.checksum(), b.checksum());
        b.tensor_mut(ParamId(0)).data_mut()[0] = 1.5;
        assert_ne!(a.checksum(), b.checksum());
        let mut c = ParamSet::new();
        c.add("v", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_is_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            init_uniform(&mut r1, &[3, 3], 3),
            init_uniform(&mut r2, &[3, 3], 3)
        );
    }
}
