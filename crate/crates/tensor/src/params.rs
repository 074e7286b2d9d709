use std::sync::Arc;

use indexmap::IndexMap;

use crate::tape::VarGrads;
use crate::{Array, Real, Result, Tape, TensorError, Var};

/// Named learnable arrays in insertion order.
///
/// Values are reference counted so registering them on a tape does not copy.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Arc<Array<T>>>,
}

/// Gradients keyed by parameter name.
pub type Gradients<T> = IndexMap<String, Array<T>>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.entries.get(name).map(|a| a.as_ref()).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array<T>> {
        self.entries
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf_shared(Arc::clone(v), requires_grad)))
            .collect();
        ParamVars { vars }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect() }
    }
}

/// Tape handles of registered parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Pulls the gradient of each registered parameter out of `grads`.
    /// Parameters that did not influence the loss get no entry.
    pub fn collect<T: Real>(&self, grads: &mut VarGrads<T>) -> Gradients<T> {
        self.vars.iter().filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g))).collect()
    }
}
