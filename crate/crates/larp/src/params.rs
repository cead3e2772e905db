//! Named parameter store shared by all models, plus the per-graph binder.
//!
//! Parameters live outside any tape as `Arc`-backed arrays; binding a
//! parameter onto a tape is a cheap handle clone. The optimizer mutates
//! values in place between graphs via `Arc::make_mut`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Buf, Tape, Tensor};

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Arc<Vec<f64>>,
}

/// Ordered collection of named parameters. Creation order is stable and
/// defines checkpoint layout and optimizer slot order.
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "param {name}");
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        let idx = self.entries.len();
        self.index.insert(name.to_string(), idx);
        self.entries.push(Param { name: name.to_string(), shape, values: Arc::new(values) });
        idx
    }

    pub fn add_normal(&mut self, rng: &mut Rng, name: &str, shape: Vec<usize>, std: f64) -> usize {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.normal() * std).collect();
        self.add(name, shape, values)
    }

    pub fn add_const(&mut self, name: &str, shape: Vec<usize>, value: f64) -> usize {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))
    }

    pub fn by_idx(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(&self.entries[self.idx(name)?])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn values_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.entries[idx].values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.values.len()).sum()
    }
}

/// Binds parameters of one store onto one tape, caching handles so each
/// parameter becomes exactly one leaf per graph.
pub struct Binder<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    /// Leaves require gradients when true (training graphs).
    pub train: bool,
    cache: RefCell<HashMap<usize, Tensor>>,
    bound: RefCell<Vec<String>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: Tape, store: &'a ParamStore, train: bool) -> Self {
        Binder { tape, store, train, cache: RefCell::new(HashMap::new()), bound: RefCell::new(Vec::new()) }
    }

    /// Parameter leaf by name (cached per graph).
    pub fn p(&self, name: &str) -> Result<Tensor> {
        let idx = self.store.idx(name)?;
        if let Some(t) = self.cache.borrow().get(&idx) {
            return Ok(t.clone());
        }
        let param = self.store.by_idx(idx);
        let buf = Buf { shape: param.shape.clone(), values: Arc::clone(&param.values) };
        let leaf = self.tape.param_leaf(buf, idx, self.train);
        self.cache.borrow_mut().insert(idx, leaf.clone());
        self.bound.borrow_mut().push(name.to_string());
        Ok(leaf)
    }

    /// Names bound on this graph so far, in binding order.
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_is_ordered_and_indexed() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        store.add_normal(&mut rng, "a.w", vec![2, 3], 0.02);
        store.add_const("a.b", vec![3], 0.0);
        assert_eq!(store.len(), 2);
        assert_eq!(store.idx("a.b").unwrap(), 1);
        assert!(store.idx("missing").is_err());
        assert_eq!(store.scalar_count(), 9);
    }

    #[test]
    fn binder_caches_leaves_and_collects_grads() {
        use crate::tensor::ops;
        let mut store = ParamStore::new();
        store.add("w", vec![2], vec![3.0, 4.0]);
        let tape = Tape::new();
        let binder = Binder::new(tape.clone(), &store, true);
        let w1 = binder.p("w").unwrap();
        let w2 = binder.p("w").unwrap();
        assert_eq!(w1.id, w2.id);
        let loss = ops::sum_all(&ops::mul(&w1, &w2).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1, vec![6.0, 8.0]);
    }
}
