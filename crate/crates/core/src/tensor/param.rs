use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::array::{NDArray, Scalar};

/// A named learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: NDArray<T>,
    pub grad: NDArray<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: NDArray<T>) -> Self {
        let grad = NDArray::zeros(value.dims());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter; only valid for the store that issued it (and its
/// clones and casts).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    idx: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.idx
    }
}

/// Ordered collection of parameters addressable by id or name.
#[derive(Clone, Debug)]
pub struct ParamStore<T = f32> {
    uid: u64,
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: NDArray<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId {
            store: self.uid,
            idx: self.params.len(),
        };
        self.by_name.insert(name.clone(), id);
        self.params.push(Param::new(name, value));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.uid
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        assert!(self.owns(id), "parameter id from another store");
        &self.params[id.idx]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        assert!(self.owns(id), "parameter id from another store");
        &mut self.params[id.idx]
    }

    pub fn value(&self, id: ParamId) -> &NDArray<T> {
        &self.get(id).value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        let uid = self.uid;
        self.params
            .iter()
            .enumerate()
            .map(move |(idx, p)| (ParamId { store: uid, idx }, p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    /// Plain gradient descent: `value -= step · grad`.
    pub fn sgd_step(&mut self, step: T) {
        for p in &mut self.params {
            for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= step * g;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            uid: self.uid,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
