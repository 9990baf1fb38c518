use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named parameter tensor tagged with the group it trains with.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
}

/// Ordered collection of named parameters.
///
/// A parameter is trainable iff its tensor has `requires_grad` set; whole
/// groups are usually toggled together.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            group: group.into(),
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group.clone());
            }
        }
        out
    }

    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.value.set_requires_grad(trainable);
        }
    }

    /// Makes exactly the listed groups trainable.
    pub fn set_trainable_groups(&mut self, groups: &[&str]) {
        for p in &mut self.params {
            p.value.set_requires_grad(groups.contains(&p.group.as_str()));
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.value.requires_grad())
            .map(|(id, _)| id)
            .collect()
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn count(&self, group: Option<&str>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    pub fn accumulate_grads(&mut self, grads: &ParamGrads) {
        for (id, g) in &grads.entries {
            self.params[id.0].value.accumulate_grad(g);
        }
    }

    /// Global L2 norm over every gradient buffer present, `None` if there
    /// are none.
    pub fn grad_norm(&self) -> Option<f32> {
        let mut any = false;
        let mut sq = 0.0f64;
        for p in &self.params {
            if let Some(g) = p.value.grad() {
                any = true;
                sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
        any.then(|| sq.sqrt() as f32)
    }
}

/// Gradients harvested from a [`Tape`] after `backward`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub entries: Vec<(ParamId, Vec<f32>)>,
}

impl ParamGrads {
    pub fn scale(&mut self, s: f32) {
        for (_, g) in &mut self.entries {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// A [`Graph`] bound to a parameter store.
///
/// Each parameter becomes at most one leaf per tape, so repeated uses share
/// a single gradient slot.
pub struct Tape<'s> {
    graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Gradients of every trainable parameter touched by the tape.
    pub fn param_grads(&self) -> ParamGrads {
        let entries = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.graph.grad(v)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect();
        ParamGrads { entries }
    }

    /// Names of frozen parameters that nevertheless hold a nonzero gradient.
    pub fn frozen_grad_violations(&self) -> Vec<String> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let p = &self.store.params[i];
                if p.value.requires_grad() {
                    return None;
                }
                let g = self.graph.grad(v)?;
                g.iter().any(|x| *x != 0.0).then(|| p.name.clone())
            })
            .collect()
    }
}

impl Deref for Tape<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Tape<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", "g", Tensor::zeros(&[2])).unwrap();
        assert_eq!(
            s.add("w", "g", Tensor::zeros(&[2])),
            Err(TensorError::DuplicateParam("w".into()))
        );
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut s = ParamStore::new();
        let id = s
            .add("w", "g", Tensor::from_slice(&[1.0, 2.0]).with_requires_grad(true))
            .unwrap();
        let mut tape = Tape::new(&s);
        let a = tape.param(id);
        let b = tape.param(id);
        assert_eq!(a, b);
        let y = tape.add(a, b).unwrap();
        let loss = tape.sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads.entries, vec![(id, vec![2.0, 2.0])]);
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut s = ParamStore::new();
        let w = s.add("w", "frozen", Tensor::from_slice(&[1.0, 2.0])).unwrap();
        let q = s
            .add("q", "train", Tensor::from_slice(&[3.0, 4.0]).with_requires_grad(true))
            .unwrap();
        let mut tape = Tape::new(&s);
        let (wv, qv) = (tape.param(w), tape.param(q));
        let y = tape.mul(wv, qv).unwrap();
        let loss = tape.sum(y, None).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(wv).is_none());
        assert_eq!(tape.grad(qv), Some(&[1.0, 2.0][..]));
        assert!(tape.frozen_grad_violations().is_empty());
    }

    #[test]
    fn grad_norm_absent_without_grads() {
        let mut s = ParamStore::new();
        let id = s.add("a", "g", Tensor::zeros(&[2])).unwrap();
        assert_eq!(s.grad_norm(), None);
        s.value_mut(id).accumulate_grad(&[3.0, 4.0]);
        assert_eq!(s.grad_norm(), Some(5.0));
    }
}
