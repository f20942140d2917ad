//! Named parameter tensors with frozen flags, and matching gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{invalid, CastError, Result};
use crate::real::Real;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<R>,
    /// Frozen tensors (the stand-in encoders) never enter a trainable set.
    pub frozen: bool,
}

impl<R> ParamEntry<R> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of named tensors.
///
/// Insertion order is preserved and defines the on-disk order in checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R = f32> {
    entries: Vec<ParamEntry<R>>,
    index: HashMap<String, usize>,
}

/// How a freshly registered tensor is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
    /// Glorot uniform for a `[fan_in, fan_out]` matrix.
    Xavier,
    /// `[I | 0]` stacked vertically: identity on the first `cols` inputs.
    IdentityTop,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Uniform(a) => {
                let d = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Xavier => {
                let (fi, fo) = (shape[0] as f64, shape[shape.len() - 1] as f64);
                let a = (6.0 / (fi + fo)).sqrt();
                let d = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::IdentityTop => {
                let (rows, cols) = (shape[0], shape[1]);
                let mut v = vec![0.0; n];
                for i in 0..cols.min(rows) {
                    v[i * cols + i] = 1.0;
                }
                v
            }
        };
        // Values are always f32-representable so checkpoints round-trip exactly.
        let data = data.into_iter().map(|x| R::c(x as f32 as f64)).collect();
        self.push(ParamEntry { name, shape: shape.to_vec(), data, frozen: false })
    }

    pub(crate) fn push(&mut self, entry: ParamEntry<R>) -> ParamId {
        let id = self.entries.len();
        self.index.insert(entry.name.clone(), id);
        self.entries.push(entry);
        ParamId(id)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[R] {
        &self.entries[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [R] {
        &mut self.entries[id.0].data
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<R> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&ParamEntry<R>> {
        self.id(name)
            .map(|id| self.entry(id))
            .ok_or_else(|| CastError::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut ParamEntry<R>> {
        match self.id(name) {
            Some(id) => Ok(&mut self.entries[id.0]),
            None => invalid(format!("no parameter named {name}")),
        }
    }

    pub fn entries(&self) -> &[ParamEntry<R>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }

    /// Converts every tensor to another element type.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|&x| S::c(x.f64())).collect(),
                    frozen: e.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; `None` marks tensors whose
/// gradient is not wanted, which lets the backward pass skip their products.
#[derive(Clone, Debug)]
pub struct Grads<R> {
    bufs: Vec<Option<Vec<R>>>,
}

impl<R: Real> Grads<R> {
    /// Buffers for every tensor selected by `wanted`.
    pub fn for_store(store: &ParamStore<R>, wanted: impl Fn(ParamId, &ParamEntry<R>) -> bool) -> Self {
        let bufs = store
            .ids()
            .map(|id| {
                let e = store.entry(id);
                wanted(id, e).then(|| vec![R::zero(); e.numel()])
            })
            .collect();
        Self { bufs }
    }

    /// Buffers for every tensor in the store.
    pub fn all(store: &ParamStore<R>) -> Self {
        Self::for_store(store, |_, _| true)
    }

    #[inline]
    pub fn slot(&mut self, id: ParamId) -> Option<&mut [R]> {
        self.bufs[id.0].as_deref_mut()
    }

    #[inline]
    pub fn wants(&self, id: ParamId) -> bool {
        self.bufs[id.0].is_some()
    }

    pub fn get(&self, id: ParamId) -> Option<&[R]> {
        self.bufs[id.0].as_deref()
    }

    pub fn zero(&mut self) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|x| *x = R::zero());
        }
    }

    pub fn scale(&mut self, s: R) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[R])> {
        self.bufs.iter().enumerate().filter_map(|(i, b)| b.as_deref().map(|b| (ParamId(i), b)))
    }
}
