use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NnError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors belonging to one model.
#[derive(Debug)]
pub struct ParamStore<F> {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Clone for ParamStore<F> {
    /// A clone gets a fresh identity so gradients recorded against the
    /// original are never attributed to the copy.
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<F>> {
        self.iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Overwrites every parameter from `values`, which must cover all names
    /// with matching shapes.
    pub fn load_map(&mut self, values: &BTreeMap<String, Tensor<F>>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let v = values
                .get(name)
                .ok_or_else(|| NnError::MissingParam(name.clone()))?;
            if v.shape() != slot.shape() {
                return Err(NnError::Shape(format!(
                    "parameter `{name}`: stored {:?}, model {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            *slot = v.clone();
        }
        Ok(())
    }

    /// Exponential moving average: `self = decay * self + (1 - decay) * other`.
    pub fn ema_update(&mut self, other: &ParamStore<F>, decay: f64) -> Result<()> {
        if self.names != other.names {
            return Err(NnError::Shape("EMA over differently named stores".into()));
        }
        let (d, e) = (F::of(decay), F::of(1.0 - decay));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = d * *x + e * y;
            }
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bind(&self, trainable: bool) -> Params<'_, F> {
        Params {
            store: self,
            trainable,
        }
    }
}

/// A store bound for one forward pass. Frozen bindings still propagate
/// gradients to their inputs but never accumulate parameter gradients.
#[derive(Clone, Copy)]
pub struct Params<'a, F> {
    pub(crate) store: &'a ParamStore<F>,
    pub(crate) trainable: bool,
}
