//! Named parameter storage with freeze flags and graph binding.

use std::collections::HashMap;

use super::graph::{Arr, Gradients, Graph, Tx};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
///
/// Iteration order is insertion order, which keeps optimizer updates and
/// checkpoint layout deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    frozen: Vec<bool>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Arr> {
        self.by_name
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Arr> {
        match self.by_name.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(Error::config(format!("unknown parameter {name}"))),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.by_name.get(name).map(|&i| self.frozen[i]).unwrap_or(false)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        match self.by_name.get(name) {
            Some(&i) => {
                self.frozen[i] = frozen;
                Ok(())
            }
            None => Err(Error::config(format!("unknown parameter {name}"))),
        }
    }

    /// Freeze or thaw every parameter whose name matches the predicate.
    pub fn set_frozen_where(&mut self, frozen: bool, pred: impl Fn(&str) -> bool) {
        for (i, name) in self.names.iter().enumerate() {
            if pred(name) {
                self.frozen[i] = frozen;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr, bool)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .zip(self.frozen.iter())
            .map(|((n, v), &f)| (n.as_str(), v, f))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    /// Total number of scalar elements across all parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Parameters bound to a graph as leaves for one forward/backward pass.
pub struct BoundParams<'g> {
    graph: &'g Graph,
    map: HashMap<String, Tx>,
    order: Vec<String>,
}

impl<'g> BoundParams<'g> {
    /// Bind every parameter as a differentiable leaf (frozen ones as
    /// constants, so no gradient work is spent on them).
    pub fn trainable(graph: &'g Graph, store: &ParamStore) -> Self {
        Self::bind(graph, store, true)
    }

    /// Bind every parameter as a constant: forward only, gradients cut.
    pub fn inference(graph: &'g Graph, store: &ParamStore) -> Self {
        Self::bind(graph, store, false)
    }

    fn bind(graph: &'g Graph, store: &ParamStore, trainable: bool) -> Self {
        let mut map = HashMap::new();
        let mut order = Vec::new();
        for (name, value, frozen) in store.iter() {
            let tx = if trainable && !frozen {
                graph.leaf(value.clone())
            } else {
                graph.constant(value.clone())
            };
            map.insert(name.to_string(), tx);
            order.push(name.to_string());
        }
        Self { graph, map, order }
    }

    pub fn get(&self, name: &str) -> Tx {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn graph(&self) -> &'g Graph {
        &self.graph
    }

    /// Extract named gradients in deterministic (insertion) order. Parameters
    /// that did not participate in the loss are omitted.
    pub fn named_grads(&self, grads: &Gradients) -> Vec<(String, Arr)> {
        self.order
            .iter()
            .filter_map(|name| {
                grads
                    .get(self.map[name])
                    .map(|g| (name.clone(), g.clone()))
            })
            .collect()
    }
}
