//! Named parameter storage shared by every model component.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to. Freeze policies are
/// defined in terms of groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Encoder,
    Lora,
    Vpt,
    Adapter,
    Neck,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Lora,
        ParamGroup::Vpt,
        ParamGroup::Adapter,
        ParamGroup::Neck,
        ParamGroup::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Lora => "lora",
            ParamGroup::Vpt => "vpt",
            ParamGroup::Adapter => "vit-adapter",
            ParamGroup::Neck => "neck",
            ParamGroup::Decoder => "decoder",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub group: ParamGroup,
    pub trainable: bool,
    /// Running statistics and similar state: stored and checkpointed, never
    /// optimized, not counted as parameters.
    pub buffer: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter name '{0}'")]
    Duplicate(String),
    #[error("unknown parameter '{0}'")]
    Unknown(String),
    #[error("parameter '{name}' has shape {expected:?}, got {got:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Ordered, named parameters with deterministic seeded initialization.
///
/// A store created with [`ParamStore::meta`] records shapes only; models
/// built on it can be counted and traced but not evaluated numerically.
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
    meta: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            meta: false,
        }
    }

    pub fn meta() -> Self {
        Self { meta: true, ..Self::new(0) }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], group: ParamGroup, init: Init) -> Result<ParamId, ParamError> {
        self.insert(name.into(), shape, group, init, false)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, shape: &[usize], group: ParamGroup, init: Init) -> Result<ParamId, ParamError> {
        self.insert(name.into(), shape, group, init, true)
    }

    fn insert(&mut self, name: String, shape: &[usize], group: ParamGroup, init: Init, buffer: bool) -> Result<ParamId, ParamError> {
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let value = if self.meta { Tensor::meta(shape) } else { self.sample(shape, init) };
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, group, trainable: !buffer, buffer });
        Ok(id)
    }

    fn sample(&mut self, shape: &[usize], init: Init) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
            }
            Init::Uniform(a) => {
                let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
            }
        };
        Tensor::new(shape, data).expect("length matches shape")
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<f32>) -> Result<(), ParamError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(ParamError::Shape {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable && !p.buffer;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.params.iter().any(|p| p.group == group && !p.buffer)
    }

    /// Sets trainability for every non-buffer parameter from its group.
    pub fn set_trainable_groups(&mut self, trainable: impl Fn(ParamGroup) -> bool) {
        for p in &mut self.params {
            p.trainable = !p.buffer && trainable(p.group);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Parameter element count (buffers excluded), optionally per group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| !p.buffer && group.is_none_or(|g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Snapshot of all values, in store order.
    pub fn snapshot(&self) -> Vec<Tensor<f32>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<f32>]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        self.params.retain(|p| p.group != group);
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), ParamId(i))).collect();
    }

    /// Overwrites values by name; every entry must exist with a matching shape.
    pub fn load_named(&mut self, entries: impl IntoIterator<Item = (String, Tensor<f32>)>) -> Result<usize, ParamError> {
        let mut n = 0;
        for (name, value) in entries {
            let id = self.id(&name).ok_or_else(|| ParamError::Unknown(name.clone()))?;
            self.set_value(id, value)?;
            n += 1;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut s = ParamStore::new(7);
            s.add("a", &[3, 4], ParamGroup::Encoder, Init::Normal(0.02)).unwrap();
            s.add("b", &[5], ParamGroup::Decoder, Init::Uniform(0.1)).unwrap();
            s.snapshot()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn duplicates_rejected() {
        let mut s = ParamStore::new(0);
        s.add("a", &[1], ParamGroup::Encoder, Init::Zeros).unwrap();
        assert_eq!(
            s.add("a", &[1], ParamGroup::Encoder, Init::Zeros),
            Err(ParamError::Duplicate("a".into()))
        );
    }

    #[test]
    fn buffers_never_trainable_nor_counted() {
        let mut s = ParamStore::new(0);
        let b = s.add_buffer("rm", &[4], ParamGroup::Decoder, Init::Zeros).unwrap();
        s.add("w", &[4], ParamGroup::Decoder, Init::Zeros).unwrap();
        s.set_trainable(b, true);
        assert!(!s.get(b).trainable);
        assert_eq!(s.count(None), 4);
        assert_eq!(s.count_trainable(), 4);
    }

    #[test]
    fn meta_store_counts_without_data() {
        let mut s = ParamStore::meta();
        let id = s.add("w", &[1024, 1024], ParamGroup::Encoder, Init::Normal(0.02)).unwrap();
        assert!(s.value(id).is_meta());
        assert_eq!(s.count(Some(ParamGroup::Encoder)), 1 << 20);
    }
}
