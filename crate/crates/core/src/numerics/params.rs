use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{arg_err, Error, Result};

/// Named tensors of a model, iterated in lexicographic name order.
///
/// Trainable weights carry `requires_grad`; running statistics and other
/// buffers do not.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Stable 64-bit FNV-1a hash, used to derive per-tensor seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return arg_err(format!("duplicate parameter name `{name}`"));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Registers a trainable tensor filled with U(-bound, bound) where
    /// bound = sqrt(1 / fan_in). Values are rounded to `f32` so that a
    /// checkpoint round trip is exact.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Result<()> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let t = Tensor::from_fn(shape, |_| {
            let u: f64 = rng.random_range(-bound..bound);
            u as f32 as f64
        });
        self.insert(name, t.with_requires_grad(true))
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<()> {
        self.insert(name, Tensor::full(shape, value).with_requires_grad(trainable))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::len)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Rounds every stored value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParamStore::new();
        for n in ["b.w", "a.z", "a.b", "c"] {
            s.init_const(n, &[1], 0.0, true).unwrap();
        }
        let names: Vec<_> = s.names().cloned().collect();
        assert_eq!(names, vec!["a.b", "a.z", "b.w", "c"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.init_const("x", &[1], 0.0, true).unwrap();
        assert!(s.init_const("x", &[1], 0.0, true).is_err());
    }

    #[test]
    fn uniform_init_is_bounded_and_deterministic() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.init_uniform("w", &[16, 4], 4, 7).unwrap();
        b.init_uniform("w", &[16, 4], 4, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= 0.5));
        assert_eq!(a.trainable_count(), 64);
    }
}
