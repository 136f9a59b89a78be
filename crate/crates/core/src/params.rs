//! Named parameter storage and graph binding.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted path, e.g. `blocks.0.spatial.w_r`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CoreError::Domain(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| CoreError::Domain(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Rounds every value to the nearest `f32` so that checkpoints are exact.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Uniform in `[-bound, bound]` with `bound = sqrt(3 / fan_in)`, i.e. unit
/// variance gain for a fan-in of `fan_in`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// Binds stored parameters into a [`Graph`] on first use.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            g,
            store,
            bound: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Uses `var` for `name` instead of a fresh leaf.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    /// Binds `name` as a constant: it takes part in the forward pass but
    /// receives no gradient.
    pub fn freeze(&mut self, name: impl Into<String>) {
        self.frozen.insert(name.into());
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.frozen.contains(name) {
            self.g.constant(value)
        } else {
            self.g.leaf(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bindings(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound, non-frozen parameter by name.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .filter_map(|(n, v)| grads.get(*v).map(|t| (n.clone(), t.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binding_is_memoized_and_frozen_gets_no_grad() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0, 2.0]));
        store.insert("b", Tensor::vector(vec![3.0, 4.0]));
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store);
        ctx.freeze("b");
        let a1 = ctx.param("a").unwrap();
        let a2 = ctx.param("a").unwrap();
        assert_eq!(a1, a2);
        let b = ctx.param("b").unwrap();
        let y = ctx.g.mul(a1, b).unwrap();
        let l = ctx.g.dot(y, &[1.0, 1.0]).unwrap();
        let grads = ctx.g.backward(l).unwrap();
        let named = ctx.named_grads(&grads);
        assert_eq!(named.keys().collect::<Vec<_>>(), vec!["a"]);
        assert_eq!(named["a"].data(), &[3.0, 4.0]);
        assert!(ctx.param("missing").is_err());
    }

    #[test]
    fn f32_rounding_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("w", uniform_init(&mut rng, 4, 4, 4));
        store.round_to_f32();
        let once = store.clone();
        store.round_to_f32();
        assert_eq!(once, store);
        assert!(once.get("w").unwrap().max_abs() <= (0.75f64).sqrt());
    }
}
