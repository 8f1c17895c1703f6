use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Uniform init in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    ///
    /// Each parameter draws from its own stream keyed by `(seed, name)`, so a
    /// parameter's initial value does not depend on which other parameters exist.
    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = self.stream(name);
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, value))
    }

    fn stream(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, name))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.ids()
            .zip(self.names.iter().zip(&self.tensors))
            .map(|(id, (n, t))| (id, n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds per-parameter gradients (indexed by `ParamId`) into the grad slots.
    pub fn accumulate(&mut self, grads: &ParamGrads, scale: f64) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                if scale == 1.0 {
                    t.accumulate_grad(g);
                } else {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    t.accumulate_grad(&scaled);
                }
            } else if t.grad().is_none() {
                t.zero_grad();
            }
        }
    }

    /// Bitwise comparison of parameter values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && bits_equal(a.data(), b.data()))
    }
}

/// Gradients for each parameter of a store; `None` where the parameter was unused.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    /// Elementwise sum in argument order; `None + x = x`.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }
}

pub(crate) fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// FNV-1a over the name, folded with the seed through splitmix64.
pub(crate) fn mix_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new(1);
        s.zeros("a", vec![2]).unwrap();
        assert!(s.zeros("a", vec![3]).is_err());
    }

    #[test]
    fn uniform_is_bounded_and_reproducible() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        a.uniform("w", vec![16, 9], 9).unwrap();
        b.uniform("w", vec![16, 9], 9).unwrap();
        assert!(a.same_values(&b));
        let bound = (1.0f64 / 9.0).sqrt();
        assert!(a.by_name("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn streams_are_independent_of_insertion_order() {
        let mut a = ParamStore::new(3);
        a.uniform("x", vec![4], 4).unwrap();
        a.uniform("y", vec![4], 4).unwrap();
        let mut b = ParamStore::new(3);
        b.uniform("y", vec![4], 4).unwrap();
        assert_eq!(a.by_name("y").unwrap().data(), b.by_name("y").unwrap().data());
    }

    #[test]
    fn iteration_order_is_insertion_order() {
        let mut s = ParamStore::new(0);
        for n in ["c", "a", "b"] {
            s.zeros(n, vec![1]).unwrap();
        }
        let names: Vec<_> = s.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, ["c", "a", "b"]);
    }
}
