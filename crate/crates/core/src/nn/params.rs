use std::collections::BTreeMap;

use super::{Real, Tensor};

/// Index of a tensor inside a [`ParamStore`].
pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State that is saved but not trained (batch-norm running statistics).
    Buffer,
}

/// Named tensors in registration order. Names are stable and unique.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name, which is a model-construction bug.
    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = self.values.len();
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| &self.values[id])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(move |id| &mut self.values[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamKind, &Tensor<T>)> {
        (0..self.values.len()).map(move |i| (i, self.names[i].as_str(), self.kinds[i], &self.values[i]))
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).filter(move |&i| self.kinds[i] == ParamKind::Trainable)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|i| self.values[i].len()).sum()
    }

    /// Copies every tensor named `src_prefix.*` in `src` onto `dst_prefix.*` here.
    /// Returns the number of tensors copied; shapes must agree.
    pub fn copy_prefix(&mut self, dst_prefix: &str, src: &ParamStore<T>, src_prefix: &str) -> usize {
        let mut copied = 0;
        for (_, name, _, value) in src.iter() {
            let Some(rest) = name.strip_prefix(src_prefix) else {
                continue;
            };
            if !rest.starts_with('.') {
                continue;
            }
            let dst_name = format!("{dst_prefix}{rest}");
            let dst = self
                .by_name_mut(&dst_name)
                .unwrap_or_else(|| panic!("no parameter `{dst_name}` to copy `{name}` into"));
            assert_eq!(dst.shape(), value.shape(), "shape mismatch copying `{name}`");
            *dst = value.clone();
            copied += 1;
        }
        copied
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}
