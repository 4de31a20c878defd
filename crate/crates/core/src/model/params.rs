use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::tensor::{Gradients, Result as TensorResult, Scalar, Tape, Tensor, Var};

/// Named tensors in a fixed insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every tensor on the tape.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> TensorResult<BoundParams> {
        let mut vars = IndexMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.leaf(t.clone(), trainable)?);
        }
        Ok(BoundParams { vars })
    }
}

/// Parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Collects per-parameter gradients by name.
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, &var) in &self.vars {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// Every parameter's name, shape and initializer, in binding order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, prefix: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{prefix}.weight"), vec![fan_in, fan_out], Init::TruncNormal));
        out.push((format!("{prefix}.bias"), vec![fan_out], Init::Zeros));
    };
    let norm = |out: &mut Vec<_>, prefix: &str, dim: usize| {
        out.push((format!("{prefix}.weight"), vec![dim], Init::Ones));
        out.push((format!("{prefix}.bias"), vec![dim], Init::Zeros));
    };
    linear(&mut out, "patch_embed", cfg.in_channels, cfg.embed_dim);
    for s in 0..cfg.num_stages() {
        let st = cfg.stage(s);
        let c = st.channels;
        for b in 0..cfg.depths[s] {
            let p = format!("stages.{s}.blocks.{b}");
            norm(&mut out, &format!("{p}.norm1"), c);
            linear(&mut out, &format!("{p}.attn.qkv"), c, 3 * c);
            if cfg.relative_position_bias {
                let entries = (2 * st.height - 1) * (2 * st.window - 1);
                out.push((format!("{p}.attn.rel_bias"), vec![entries, st.heads], Init::TruncNormal));
            }
            linear(&mut out, &format!("{p}.attn.proj"), c, c);
            norm(&mut out, &format!("{p}.norm2"), c);
            linear(&mut out, &format!("{p}.mlp.fc1"), c, cfg.mlp_ratio * c);
            linear(&mut out, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * c, c);
        }
        if s + 1 < cfg.num_stages() {
            norm(&mut out, &format!("stages.{s}.merge.norm"), 4 * c);
            linear(&mut out, &format!("stages.{s}.merge.reduction"), 4 * c, 2 * c);
        }
    }
    norm(&mut out, "norm", cfg.feature_dim());
    linear(&mut out, "head", cfg.feature_dim(), cfg.num_classes);
    out
}

pub(crate) fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Truncated normal (std 0.02, cut at two standard deviations) for weight
/// matrices, zeros for biases, ones/zeros for layer norms.
pub(crate) fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    const STD: f64 = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, STD).expect("valid std");
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal => Tensor::from_fn(shape, |_| loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= 2.0 * STD {
                    break T::of(v);
                }
            }),
        };
        store.insert(name, t);
    }
    store
}
