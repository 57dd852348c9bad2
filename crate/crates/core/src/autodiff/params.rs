use std::collections::HashMap;

use super::{AutodiffError, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    /// Dotted path, e.g. `stage2.block1.dpp.bases`.
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Registry of named model parameters. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId, AutodiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, trainable });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Number of scalar parameters, split as `(trainable, frozen)`.
    pub fn census(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.tensor.numel(), f)
            } else {
                (t, f + p.tensor.numel())
            }
        })
    }
}

/// Parameter gradients from one backward pass. Parameters that were not
/// reached (or are frozen) have no entry and read as zero.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub(crate) fn accumulate(&mut self, id: ParamId, shape: &[usize], g: &[f64]) {
        let entry = self.grads.entry(id).or_insert_with(|| Tensor::zeros(shape));
        for (a, b) in entry.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient of `id`, materializing zeros for unreached parameters.
    pub fn get_or_zeros(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).tensor.shape()))
    }

    pub fn by_name(&self, store: &ParamStore) -> HashMap<String, Tensor> {
        store
            .iter()
            .map(|(id, p)| (p.name.clone(), self.get_or_zeros(store, id)))
            .collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    /// `self += other`, used to sum gradients over a mini-batch.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}
