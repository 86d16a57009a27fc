use std::collections::HashMap;

use crate::error::{ensure, Error, Result};
use crate::tensor::{Dims, Scalar, Tensor4};

/// One named tensor of model state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor4<T>,
    /// Updated by the optimizer. Running statistics are not.
    pub trainable: bool,
    /// Receives the L2 decay term. Only kernels do.
    pub decay: bool,
}

/// Ordered, name-addressable collection of model state.
///
/// Entry order is fixed by the architecture walk, so two stores built from
/// the same spec line up index by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        value: Tensor4<T>,
        trainable: bool,
        decay: bool,
    ) -> Result<usize> {
        let name = name.into();
        ensure!(
            !self.lookup.contains_key(&name),
            Config,
            "duplicate parameter `{name}`"
        );
        let id = self.params.len();
        self.lookup.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn value(&self, id: usize) -> &Tensor4<T> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor4<T> {
        &mut self.params[id].value
    }

    /// Two distinct entries mutably at once.
    pub fn pair_mut(&mut self, a: usize, b: usize) -> (&mut Tensor4<T>, &mut Tensor4<T>) {
        assert!(a != b, "pair_mut needs distinct ids");
        if a < b {
            let (lo, hi) = self.params.split_at_mut(b);
            (&mut lo[a].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.params.split_at_mut(a);
            (&mut hi[0].value, &mut lo[b].value)
        }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor4<T>> {
        self.id(name)
            .map(|i| self.value(i))
            .ok_or_else(|| Error::Config(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor4<T>> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("no parameter `{name}`")))?;
        Ok(self.value_mut(id))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn trainable_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len() as u64)
            .sum()
    }

    pub fn non_trainable_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| !p.trainable)
            .map(|p| p.value.len() as u64)
            .sum()
    }

    /// Same names and flags, every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        self.map_values(|p| p.value.zeros_like())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        self.map_values(|p| p.value.cast())
    }

    pub fn map_values<U: Scalar>(&self, f: impl Fn(&Param<T>) -> Tensor4<U>) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: f(p),
                    trainable: p.trainable,
                    decay: p.decay,
                })
                .collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Errors unless `other` has the same names, dims and flags in the same order.
    pub fn check_layout<U: Scalar>(&self, other: &ParamStore<U>) -> Result<()> {
        ensure!(
            self.len() == other.len(),
            Shape,
            "parameter count {} differs from {}",
            self.len(),
            other.len()
        );
        for (a, b) in self.params.iter().zip(other.iter()) {
            ensure!(
                a.name == b.name && a.value.dims() == b.value.dims() && a.trainable == b.trainable,
                Shape,
                "parameter `{}` {} does not match `{}` {}",
                a.name,
                a.value.dims(),
                b.name,
                b.value.dims()
            );
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn dims_of(&self, id: usize) -> Dims {
        self.params[id].value.dims()
    }
}
