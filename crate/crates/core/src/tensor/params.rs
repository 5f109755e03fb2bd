use std::collections::HashMap;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, named collection of model state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Registers every parameter on `tape` as a borrowed leaf, in store order.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| tape.leaf_ref(&p.value, p.trainable))
            .collect()
    }

    /// Like [`bind`](Self::bind) but copies every value onto the tape, so
    /// the tape may outlive the store.
    pub fn bind_owned(&self, tape: &mut Tape<'_, T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect()
    }

    /// Replaces values by name; shapes must match and every entry must be present.
    pub fn load_named(&mut self, arrays: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<T>> =
            arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.entries {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Format {
                    field: "array name",
                    detail: format!("checkpoint lacks {}", p.name),
                })?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(
                    "load_named",
                    format!("{}: {:?} vs {:?}", p.name, t.shape(), p.value.shape()),
                ));
            }
            p.value = (*t).clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), &p.value))
            .collect()
    }
}
