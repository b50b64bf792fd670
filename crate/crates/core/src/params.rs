//! Named parameter storage and binding of parameters onto a tape.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named tensors plus the set of names currently frozen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn set_frozen(&mut self, names: impl IntoIterator<Item = String>) {
        self.frozen = names.into_iter().collect();
    }

    /// Freeze every tensor whose name starts with one of `prefixes`.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        let hits: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| prefixes.iter().any(|p| k.starts_with(p)))
            .cloned()
            .collect();
        self.frozen.extend(hits);
    }

    /// Sub-store of the tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Lazily places parameters on a tape, each at most once.
///
/// Names in `trainable` become gradient-receiving leaves; everything else
/// enters as a constant. Names pre-bound with [`Binder::bind`] use the given
/// variable instead of the stored tensor.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Option<&'a BTreeSet<String>>,
    vars: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    /// Every parameter enters as a constant.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: None,
            vars: HashMap::new(),
        }
    }

    pub fn training(store: &'a ParamStore, trainable: &'a BTreeSet<String>) -> Self {
        Self {
            store,
            trainable: Some(trainable),
            vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let rg = self.trainable.is_some_and(|s| s.contains(name));
        let v = tape.leaf(t, rg);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after a backward pass.
    /// Parameters never reached get an all-zero gradient.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        if let Some(train) = self.trainable {
            for name in train {
                if let Some(&v) = self.vars.get(name) {
                    let g = tape
                        .grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_places_each_param_once() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0, 2.0]));
        store.insert("b", Tensor::vector(vec![3.0]));
        let train: BTreeSet<String> = ["a".to_string()].into();
        let mut tape = Tape::new();
        let mut binder = Binder::training(&store, &train);
        let a1 = binder.var(&mut tape, "a").unwrap();
        let a2 = binder.var(&mut tape, "a").unwrap();
        let b = binder.var(&mut tape, "b").unwrap();
        assert_eq!(a1, a2);
        assert!(tape.requires_grad(a1));
        assert!(!tape.requires_grad(b));
        assert!(matches!(
            binder.var(&mut tape, "missing"),
            Err(Error::UnknownTensor(_))
        ));
    }

    #[test]
    fn freeze_prefixes_marks_matching_names() {
        let mut store = ParamStore::new();
        store.insert("vis.a", Tensor::scalar(1.0));
        store.insert("text.a", Tensor::scalar(1.0));
        store.insert("head.a", Tensor::scalar(1.0));
        store.freeze_prefixes(&["vis.", "text."]);
        assert!(store.is_frozen("vis.a"));
        assert!(store.is_frozen("text.a"));
        assert!(!store.is_frozen("head.a"));
    }
}
