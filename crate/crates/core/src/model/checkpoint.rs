//! Binary checkpoint: little-endian, magic `SSWINCKP`, a JSON metadata
//! block, then named tensors with dtype and shape.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, ParamStore, SwinModel};
use crate::dsp::FeatureNorm;
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"SSWINCKP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Hash of the front-end config the model was trained on.
    pub dsp_hash: u64,
    pub normalization: Option<FeatureNorm>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: &SwinModel<T>, dsp_hash: u64, normalization: Option<FeatureNorm>) -> Self {
        Self {
            meta: CheckpointMeta {
                model: model.config().clone(),
                dsp_hash,
                normalization,
            },
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<(SwinModel<T>, CheckpointMeta), ModelError> {
        let model = SwinModel::from_params(self.meta.model.clone(), self.params)?;
        Ok((model, self.meta))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::Corrupt(format!("{what} too large")))
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, ckpt: &Checkpoint<T>) -> Result<(), CheckpointError> {
    let meta = serde_json::to_vec(&ckpt.meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&len_u32(meta.len(), "metadata")?.to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&len_u32(ckpt.params.len(), "tensor count")?.to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        buf.extend_from_slice(&len_u32(name.len(), "name")?.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.code());
        buf.extend_from_slice(&len_u32(t.ndim(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode<U: Scalar, T: Scalar>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(U::DTYPE.size_of())
        .map(|c| T::of(U::read_le(c).as_f64()))
        .collect()
}

/// Reads a checkpoint, converting tensors to `T` if stored in another dtype.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len)?)?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let code = c.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| CheckpointError::Corrupt(format!("unknown dtype {code}")))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{name}` is too large")))?;
        let raw = c.take(numel)?;
        let data = match dtype {
            DType::F32 => decode::<f32, T>(raw),
            DType::F64 => decode::<f64, T>(raw),
        };
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params.insert(name, t);
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint { meta, params })
}
