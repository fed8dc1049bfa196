//! Parameterised layers shared by the attention tower, the fusion heads
//! and the question encoder.
//!
//! Parameters live in a [`ParamStore`] under unique hierarchical names.
//! A forward pass runs inside a [`Session`], which copies each parameter
//! into its graph on first use and remembers the binding so gradients
//! can be read back per parameter after [`crate::Graph::backward`].

mod embedding_file;
mod layers;

pub use embedding_file::{read_embedding_file, EmbeddingFile};
pub use layers::{Embedding, LayerNorm, Linear, Lstm, LN_EPS};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered set of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optional backward) pass over a parameter store.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
    trace: Option<Vec<(String, Var)>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: None,
        }
    }

    /// Starts keeping labelled intermediate values (attention maps,
    /// pooling weights) for inspection.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn record(&mut self, label: impl FnOnce() -> String, v: Var) {
        if let Some(t) = self.trace.as_mut() {
            t.push((label(), v));
        }
    }

    pub fn trace(&self) -> &[(String, Var)] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Mode::Eval, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph handle for parameter `id`, binding it on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Inverted dropout in train mode, identity in eval mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        match self.mode {
            Mode::Eval => Ok(x),
            Mode::Train => self.graph.dropout(x, rate, &mut self.rng),
        }
    }

    /// Per-parameter gradients, zero for parameters that were never bound
    /// or do not reach the loss.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.store
            .iter()
            .map(|(id, p)| match self.bound[id.0] {
                Some(v) => grads.get_or_zeros(v),
                None => Tensor::zeros(p.value.shape()),
            })
            .collect()
    }

    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor<T>>> {
        let grads = self.graph.backward(loss)?;
        Ok(self.param_grads(&grads))
    }
}

/// Weight initialisation: Glorot-uniform weights, zero biases, unit
/// layer-norm gains, `N(0, 0.05)` embeddings.
pub struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn glorot<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = glorot_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(self.rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::new(&[fan_in, fan_out], data).expect("shape")
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(self.rng))).collect();
        Tensor::new(shape, data).expect("shape")
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Standard deviation of embedding initialisation.
pub const EMBED_INIT_STD: f64 = 0.05;
