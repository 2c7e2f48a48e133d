use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, kept in lexicographic name order so iteration,
/// optimizer updates and serialization are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
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

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Overlays `other` on top of `self`; entries in `other` win.
    pub fn merged(&self, other: &ParamSet) -> ParamSet {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.insert(k.clone(), v.clone());
        }
        out
    }

    /// Subset whose names satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Fan-in uniform initialization in `[-1/√fan_in, 1/√fan_in]`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

/// Lazily places parameters on a graph. Each name is bound at most once per
/// graph, so a tensor used from two places (twin towers) receives the sum of
/// both gradient contributions.
pub struct Binder<'p> {
    params: &'p ParamSet,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    bound: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamSet, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Self {
            params,
            trainable: Box::new(trainable),
            bound: BTreeMap::new(),
        }
    }

    /// Every parameter is trainable.
    pub fn all(params: &'p ParamSet) -> Self {
        Self::new(params, |_| true)
    }

    /// Nothing is trainable; for inference.
    pub fn frozen(params: &'p ParamSet) -> Self {
        Self::new(params, |_| false)
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?.clone();
        let v = g.leaf(t, (self.trainable)(name))?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients for every trainable parameter that took part in the graph.
    /// Trainable parameters that were bound but received no gradient get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter(|(name, _)| (self.trainable)(name))
            .map(|(name, v)| {
                let grad = g
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(*v).len()]);
                (name.clone(), grad)
            })
            .collect()
    }
}
