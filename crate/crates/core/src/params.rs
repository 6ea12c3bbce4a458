//! Named parameter/buffer stores and the shared batch-norm layer.
//!
//! Parameters live outside any graph. Each forward pass binds them into a
//! fresh [`Graph`] (as differentiable leaves for training, constants for
//! evaluation); after `backward` the gradients are copied back out by
//! index. Buffers hold batch-norm running statistics: saved in
//! checkpoints, never differentiated.

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::autodiff::{Arr, Graph, Tid};
use crate::rng::normal;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const IN_EPS: f64 = 1e-5;

/// Forward mode: batch statistics vs frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
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
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Arr)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Bind every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            ids: self.values.iter().map(|v| g.leaf(v.clone())).collect(),
        }
    }

    /// Bind every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        Binding {
            ids: self.values.iter().map(|v| g.constant(v.clone())).collect(),
        }
    }
}

/// Tape handles for one binding of a [`ParamStore`].
pub struct Binding {
    ids: Vec<Tid>,
}

impl Binding {
    /// Build a binding from explicit tape handles in store order (the
    /// gradient checker probes parameters as individual leaves).
    pub fn from_ids(ids: Vec<Tid>) -> Self {
        Binding { ids }
    }

    pub fn id(&self, p: ParamId) -> Tid {
        self.ids[p.0]
    }

    pub fn ids(&self) -> &[Tid] {
        &self.ids
    }
}

#[derive(Debug, Clone, Default)]
pub struct BufferStore {
    names: Vec<String>,
    values: Vec<ndarray::Array1<f64>>,
    index: HashMap<String, usize>,
}

impl BufferStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ndarray::Array1<f64>) -> BufId {
        assert!(!self.index.contains_key(name), "duplicate buffer {name}");
        let id = BufId(self.values.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.values.push(value);
        id
    }

    pub fn value(&self, id: BufId) -> &ndarray::Array1<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: BufId) -> &mut ndarray::Array1<f64> {
        &mut self.values[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<BufId> {
        self.index.get(name).map(|&i| BufId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ndarray::Array1<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }
}

/// Batch-norm layer: affine parameters plus running statistics. Train
/// mode normalizes with batch statistics over all rows fed in and updates
/// the running estimates; eval mode applies the frozen affine map.
#[derive(Debug, Clone, Copy)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufId,
    pub running_var: BufId,
}

impl BnLayer {
    pub fn new(
        params: &mut ParamStore,
        buffers: &mut BufferStore,
        name: &str,
        features: usize,
    ) -> Self {
        let gamma = params.add(&format!("{name}.gamma"), Arr::ones(IxDyn(&[features])));
        let beta = params.add(&format!("{name}.beta"), Arr::zeros(IxDyn(&[features])));
        let running_mean = buffers.add(
            &format!("{name}.running_mean"),
            ndarray::Array1::zeros(features),
        );
        let running_var = buffers.add(
            &format!("{name}.running_var"),
            ndarray::Array1::ones(features),
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    /// Normalize `x [rows, features]`. In train mode the running stats in
    /// `buffers` are updated in place.
    pub fn apply(
        &self,
        g: &mut Graph,
        x: Tid,
        binding: &Binding,
        buffers: &mut BufferStore,
        mode: Mode,
    ) -> Tid {
        let gamma = binding.id(self.gamma);
        let beta = binding.id(self.beta);
        match mode {
            Mode::Train => {
                let (out, mean, var) = g.batchnorm_train(x, gamma, beta, BN_EPS);
                let rm = buffers.value_mut(self.running_mean);
                rm.zip_mut_with(&mean, |r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
                let rv = buffers.value_mut(self.running_var);
                rv.zip_mut_with(&var, |r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
                out
            }
            Mode::Eval => {
                let mean = buffers.value(self.running_mean).clone();
                let var = buffers.value(self.running_var).clone();
                g.batchnorm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }
}

// ---- initialization -----------------------------------------------------

pub fn randn_arr(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Arr {
    Arr::from_shape_simple_fn(IxDyn(dims), || normal(rng) * std)
}

/// He initialization for ReLU-followed linear maps.
pub fn he_normal(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Arr {
    randn_arr(rng, dims, (2.0 / fan_in as f64).sqrt())
}

/// Xavier-style initialization for linear/sigmoid-followed maps.
pub fn xavier_normal(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Arr {
    randn_arr(rng, dims, (1.0 / fan_in as f64).sqrt())
}
