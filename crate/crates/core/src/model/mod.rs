//! The hierarchical shifted-window Transformer: time-segment split, 1x1
//! patch embedding, stages of alternating local/shifted window blocks joined
//! by patch merging, then norm, average pooling and a linear head.

mod attention;
mod block;
mod checkpoint;
mod config;
mod params;
mod window;

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

use crate::dsp::SpectrogramBatch;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub use attention::{relative_position_index, window_msa, AttentionParams};
pub use block::{gather_quads, patch_embed, patch_merging, swin_block, BlockParams, LinearParams, MergeParams, NormParams};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
pub use config::{ModelConfig, StageShape};
pub use params::{BoundParams, ParamStore};
pub use window::{
    build_shift_mask, cyclic_shift, split_segments, window_merge, window_partition, GridDims, TokenGrid, WindowSet,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Shift applied by shifted blocks: half the effective window.
pub fn shift_offset(window: usize) -> usize {
    window / 2
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(b, k)` class scores.
    pub logits: Var,
    /// `(b, feature_dim)` pooled feature fed to the head.
    pub pooled: Var,
    /// Token grid after the blocks of each stage, before merging.
    pub stages: Vec<TokenGrid>,
}

type MaskKey = (usize, usize, usize, usize);

pub struct SwinModel<T: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    masks: Mutex<HashMap<MaskKey, Tensor<T>>>,
}

impl<T: Scalar> std::fmt::Debug for SwinModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SwinModel")
            .field("cfg", &self.cfg)
            .field("num_params", &self.num_params())
            .finish()
    }
}

impl<T: Scalar> Clone for SwinModel<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            masks: Mutex::new(HashMap::new()),
        }
    }
}

impl<T: Scalar> SwinModel<T> {
    /// Freshly initialized model; initialization is a pure function of
    /// `(cfg, seed)`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = params::init_params(&cfg, seed);
        Ok(Self::assemble(cfg, params))
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        Self::check_layout(&cfg, &params)?;
        Ok(Self::assemble(cfg, params))
    }

    fn assemble(cfg: ModelConfig, params: ParamStore<T>) -> Self {
        Self {
            cfg,
            params,
            masks: Mutex::new(HashMap::new()),
        }
    }

    fn check_layout(cfg: &ModelConfig, params: &ParamStore<T>) -> Result<(), ModelError> {
        let expected = params::param_shapes(cfg);
        if expected.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            let t = params.get(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamStore<T>) -> Result<(), ModelError> {
        Self::check_layout(&self.cfg, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Cached `build_shift_mask` result.
    pub fn shift_mask(&self, height: usize, width: usize, window: usize, offset: usize) -> Tensor<T> {
        let mut cache = self.masks.lock().expect("mask cache poisoned");
        cache
            .entry((height, width, window, offset))
            .or_insert_with(|| build_shift_mask(height, width, window, offset))
            .clone()
    }

    pub fn forward(&self, tape: &Tape<T>, bound: &BoundParams, x: Var) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.cfg;
        let expected = [cfg.in_channels, cfg.n_mels, cfg.frames];
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != expected {
            return Err(ModelError::Shape(format!(
                "input {shape:?} does not match (b, {}, {}, {})",
                cfg.in_channels, cfg.n_mels, cfg.frames
            )));
        }
        let batch = shape[0];
        let eps = cfg.layer_norm_eps;

        let split = split_segments(tape, x, cfg.segments)?;
        let mut grid = patch_embed(tape, split, &linear_params(bound, "patch_embed")?)?;

        let mut stages = Vec::with_capacity(cfg.num_stages());
        for s in 0..cfg.num_stages() {
            let st = cfg.stage(s);
            debug_assert_eq!(grid.dims.shape()[1..], [st.height, st.width, st.channels]);
            for b in 0..cfg.depths[s] {
                let offset = if b % 2 == 1 { shift_offset(st.window) } else { 0 };
                let mask = (offset > 0).then(|| self.shift_mask(st.height, st.width, st.window, offset));
                let params = block_params(bound, s, b, cfg.relative_position_bias)?;
                grid = swin_block(tape, &grid, &params, st.window, offset, st.heads, mask.as_ref(), eps)?;
            }
            stages.push(grid);
            if s + 1 < cfg.num_stages() {
                let p = format!("stages.{s}.merge");
                let params = MergeParams {
                    norm: norm_params(bound, &format!("{p}.norm"))?,
                    reduction: linear_params(bound, &format!("{p}.reduction"))?,
                };
                grid = patch_merging(tape, &grid, &params, eps)?;
            }
        }

        let GridDims {
            batch: folded,
            height,
            width,
            channels,
        } = grid.dims;
        let normed = tape.layer_norm(grid.values, bound.var("norm.weight")?, bound.var("norm.bias")?, eps)?;
        let tokens = tape.reshape(normed, &[folded, height * width, channels])?;
        let per_segment = tape.mean_axis(tokens, 1)?;
        let per_sample = tape.reshape(per_segment, &[batch, cfg.segments, channels])?;
        let pooled = tape.mean_axis(per_sample, 1)?;
        let logits = tape.linear(pooled, bound.var("head.weight")?, bound.var("head.bias")?)?;
        Ok(ForwardOutput {
            logits,
            pooled,
            stages,
        })
    }

    /// Inference-only forward returning `(b, k)` logits.
    pub fn logits(&self, batch: &SpectrogramBatch) -> Result<Tensor<T>, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        let x = tape.constant(batch.to_tensor())?;
        let out = self.forward(&tape, &bound, x)?;
        Ok(tape.value(out.logits))
    }

    /// Channel-mean map of every stage output, each `(b, N, H, W)`.
    pub fn feature_maps(&self, batch: &SpectrogramBatch) -> Result<Vec<Tensor<T>>, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false)?;
        let x = tape.constant(batch.to_tensor())?;
        let out = self.forward(&tape, &bound, x)?;
        out.stages
            .iter()
            .map(|g| {
                let mean = tape.mean_axis(g.values, 3)?;
                let map = tape.reshape(mean, &[batch.batch, self.cfg.segments, g.dims.height, g.dims.width])?;
                Ok(tape.value(map))
            })
            .collect()
    }
}

fn norm_params(bound: &BoundParams, prefix: &str) -> Result<NormParams, ModelError> {
    Ok(NormParams {
        weight: bound.var(&format!("{prefix}.weight"))?,
        bias: bound.var(&format!("{prefix}.bias"))?,
    })
}

fn linear_params(bound: &BoundParams, prefix: &str) -> Result<LinearParams, ModelError> {
    Ok(LinearParams {
        weight: bound.var(&format!("{prefix}.weight"))?,
        bias: bound.var(&format!("{prefix}.bias"))?,
    })
}

fn block_params(bound: &BoundParams, stage: usize, block: usize, rel_bias: bool) -> Result<BlockParams, ModelError> {
    let p = format!("stages.{stage}.blocks.{block}");
    let qkv = linear_params(bound, &format!("{p}.attn.qkv"))?;
    let proj = linear_params(bound, &format!("{p}.attn.proj"))?;
    Ok(BlockParams {
        norm1: norm_params(bound, &format!("{p}.norm1"))?,
        attn: AttentionParams {
            qkv_weight: qkv.weight,
            qkv_bias: qkv.bias,
            proj_weight: proj.weight,
            proj_bias: proj.bias,
            rel_bias: if rel_bias {
                Some(bound.var(&format!("{p}.attn.rel_bias"))?)
            } else {
                None
            },
        },
        norm2: norm_params(bound, &format!("{p}.norm2"))?,
        fc1: linear_params(bound, &format!("{p}.mlp.fc1"))?,
        fc2: linear_params(bound, &format!("{p}.mlp.fc2"))?,
    })
}

#[cfg(test)]
mod tests;
