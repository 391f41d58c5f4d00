use std::collections::BTreeMap;

use super::{Gradients, Scalar, Tape, Tensor, TensorError, Var};

/// A named learnable tensor and its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Param<T>>,
}

/// Tape handles for every parameter of a store, created by [`ParamStore::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param { value, grad: None });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name).map(|p| p.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Pushes every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone(), requires_grad)))
            .collect();
        Bindings { vars }
    }

    /// Extracts the per-parameter gradients of a backward pass.
    pub fn collect_grads(
        &self,
        bindings: &Bindings,
        grads: &mut Gradients<T>,
    ) -> BTreeMap<String, Tensor<T>> {
        bindings
            .iter()
            .filter_map(|(name, var)| grads.take(var).map(|g| (name.to_string(), g)))
            .collect()
    }

    /// Stores gradients; parameters absent from `grads` keep no gradient.
    pub fn set_grads(&mut self, grads: BTreeMap<String, Tensor<T>>) -> Result<(), TensorError> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(&name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if p.value.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "set_grads",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            p.grad = Some(g);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }
}
