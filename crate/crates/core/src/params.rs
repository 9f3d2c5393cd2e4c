//! Named parameter storage and the per-forward binding session.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value from `other`, which must hold the same names and
    /// shapes in the same order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for i in 0..self.len() {
            if self.names[i] != other.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected {}, found {}",
                    self.names[i], other.names[i]
                )));
            }
            if self.values[i].shape() != other.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: expected shape {:?}, found {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    other.values[i].shape()
                )));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

/// One forward pass: a fresh graph, lazily bound parameters, the mode flag
/// and the random stream that dropout draws from.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, training: bool, rng: ChaCha8Rng) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            training,
            rng,
        }
    }

    /// Evaluation session; dropout is inert so the seed is irrelevant.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, false, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Graph handle for a parameter, creating the leaf on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self.graph.param(self.store.get(id).clone())?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Gradients aligned with the store; parameters unused by this forward
    /// pass, or not reached by backward, get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| self.graph.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect()
    }
}

/// splitmix64 finaliser; derives independent stream seeds from a base seed.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream, index))
}

/// Stream identifiers for [`stream_rng`].
pub mod streams {
    pub const INIT: u64 = 1;
    pub const EPOCH: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const AUGMENT: u64 = 5;
}
