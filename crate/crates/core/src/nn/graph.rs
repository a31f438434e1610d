use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::store::{ParamId, ParamStore};

/// A forward pass in progress: a fresh tape plus the parameter store it reads
/// from. Each parameter is placed on the tape at most once; trainable ones as
/// gradient leaves, frozen ones and buffers as constants.
pub struct Graph<'s> {
    pub tape: Tape,
    store: StoreAccess<'s>,
    bound: Vec<Option<Var>>,
}

enum StoreAccess<'s> {
    Exclusive(&'s mut ParamStore),
    Shared(&'s ParamStore),
}

/// Gradients for the trainable parameters touched by a forward pass, in
/// parameter order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub entries: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s mut ParamStore) -> Self {
        let n = store.len();
        Graph {
            tape: Tape::new(),
            store: StoreAccess::Exclusive(store),
            bound: vec![None; n],
        }
    }

    /// A graph that cannot mutate the store; train-mode batch norm is
    /// rejected on it.
    pub fn read_only(store: &'s ParamStore) -> Self {
        let n = store.len();
        Graph {
            tape: Tape::new(),
            store: StoreAccess::Shared(store),
            bound: vec![None; n],
        }
    }

    pub fn store(&self) -> &ParamStore {
        match &self.store {
            StoreAccess::Exclusive(s) => s,
            StoreAccess::Shared(s) => s,
        }
    }

    pub fn store_mut(&mut self) -> Result<&mut ParamStore> {
        match &mut self.store {
            StoreAccess::Exclusive(s) => Ok(s),
            StoreAccess::Shared(_) => Err(Error::State(
                "parameter store is read-only in this pass".into(),
            )),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.index()] {
            return Ok(v);
        }
        let p = self.store().get(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable)?;
        self.bound[id.index()] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Runs the backward pass and collects gradients of trainable parameters.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)?;
        let mut entries = Vec::new();
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if self.tape.requires_grad(*v) {
                    entries.push((ParamId(i), self.tape.grad(*v).to_vec()));
                }
            }
        }
        Ok(Gradients { entries })
    }
}
