//! Named parameter storage shared between the model and the optimizer.

use std::ops::Index;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    decay: bool,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it as subject to weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    /// Mutable access for the optimizer; copies only if a graph still
    /// holds the old value.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.get(id).shape(), "shape change for {}", self.name(id));
        self.entries[id.0].value = Arc::new(value);
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| (*e.value).clone()).collect()
    }

    /// Registers every parameter as a tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    /// Registers every parameter as an untracked constant of `g`.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, track: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| g.leaf_shared(Arc::clone(&e.value), track))
                .collect(),
        )
    }

    /// Wraps externally created leaves (one per parameter, in store order)
    /// as a [`Bound`]. Used by finite-difference checks that rebuild the
    /// graph from perturbed copies of the parameters.
    pub fn bound_from(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.entries.len());
        Bound(vars.to_vec())
    }
}

/// Normal(0, std²) truncated to ±2 std by resampling.
pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = truncated_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn get_mut_does_not_disturb_bound_graph() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0), true);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        store.get_mut(id).data_mut()[0] = 2.0;
        assert_eq!(g.value(bound[id]).item(), 1.0);
        assert_eq!(store.get(id).item(), 2.0);
    }
}
