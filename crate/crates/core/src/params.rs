//! Named parameter sets and their binding onto a tape.

use indexmap::IndexMap;

use crate::autodiff::{BatchStats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    tensor: Tensor<T>,
    trainable: bool,
}

/// Ordered name → tensor map for one network. Trainable entries are
/// weights; the rest are buffers such as batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Element> Default for NetworkParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> NetworkParams<T> {
    pub fn new() -> Self {
        NetworkParams { entries: IndexMap::new() }
    }

    pub(crate) fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Entry { tensor, trainable });
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    /// Replaces a tensor of identical shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        tensor.expect_shape("set_param", e.tensor.shape())?;
        e.tensor = tensor;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.is_finite())
    }

    pub fn cast<U: Element>(&self) -> NetworkParams<U> {
        NetworkParams {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies every tensor from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &NetworkParams<T>) -> Result<()> {
        for (name, e) in &mut self.entries {
            let t = other.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            t.expect_shape("load_params", e.tensor.shape())?;
            e.tensor = t.clone();
        }
        Ok(())
    }

    pub(crate) fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub(crate) fn entry_at(&self, i: usize) -> (&str, &Tensor<T>, bool) {
        let (k, e) = self.entries.get_index(i).expect("index in range");
        (k, &e.tensor, e.trainable)
    }

    pub(crate) fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries.get_index_mut(i).expect("index in range").1.tensor
    }
}

/// Which tape vars a forward pass created for a parameter set.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn var(&self, index: usize) -> Option<Var> {
        self.vars.get(index).copied().flatten()
    }
}

/// A parameter set bound to a tape for one forward pass.
///
/// Parameters are recorded lazily on first use. When `trainable` is false
/// the parameters enter the tape as constants, so the network acts frozen
/// while gradients still flow through it to its inputs.
pub struct Bound<'a, T: Element> {
    params: Slot<'a, T>,
    vars: Vec<Option<Var>>,
    pub mode: BnMode,
    trainable: bool,
    pub bn_momentum: T,
    pub bn_eps: T,
}

enum Slot<'a, T> {
    Mut(&'a mut NetworkParams<T>),
    Shared(&'a NetworkParams<T>),
}

impl<T: Element> Slot<'_, T> {
    fn get(&self) -> &NetworkParams<T> {
        match self {
            Slot::Mut(p) => p,
            Slot::Shared(p) => p,
        }
    }
}

impl<'a, T: Element> Bound<'a, T> {
    pub fn new(params: &'a mut NetworkParams<T>, mode: BnMode, trainable: bool) -> Self {
        Self::with_slot(Slot::Mut(params), mode, trainable)
    }

    /// Read-only binding for inference: eval-mode batch norm, constants only.
    pub fn eval(params: &'a NetworkParams<T>) -> Self {
        Self::with_slot(Slot::Shared(params), BnMode::Eval, false)
    }

    /// Read-only binding whose parameters still receive gradients; batch
    /// norm runs in eval mode, so no running statistic is written.
    pub fn eval_trainable(params: &'a NetworkParams<T>) -> Self {
        Self::with_slot(Slot::Shared(params), BnMode::Eval, true)
    }

    fn with_slot(params: Slot<'a, T>, mode: BnMode, trainable: bool) -> Self {
        let n = params.get().len();
        Bound {
            params,
            vars: vec![None; n],
            mode,
            trainable,
            bn_momentum: T::from_f64(0.1),
            bn_eps: T::from_f64(1e-5),
        }
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        let i = self
            .params
            .get()
            .index_of(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if let Some(v) = self.vars[i] {
            if tape.value(v).is_ok() {
                return Ok(v);
            }
        }
        let (_, t, trainable) = self.params.get().entry_at(i);
        let v = tape.leaf(t.clone(), trainable && self.trainable);
        self.vars[i] = Some(v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get().get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Exponential moving average update of running batch-norm statistics.
    pub(crate) fn update_running(&mut self, prefix: &str, stats: &BatchStats<T>) -> Result<()> {
        let m = self.bn_momentum;
        let Slot::Mut(params) = &mut self.params else {
            return Err(Error::invalid(
                "batchnorm2d",
                "train-mode batch norm needs a mutable parameter binding",
            ));
        };
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
            let name = format!("{prefix}.{suffix}");
            let t = params.get_mut(&name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Binding {
        Binding { vars: self.vars }
    }
}
