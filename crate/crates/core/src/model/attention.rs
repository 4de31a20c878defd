use super::window::WindowSet;
use super::ModelError;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Tape handles for one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
    /// `((2H - 1) * (2t - 1), heads)` table, when enabled.
    pub rel_bias: Option<Var>,
}

/// Flat index into the relative-bias table for every token pair of an
/// `height x window` window.
pub fn relative_position_index(height: usize, window: usize) -> Vec<usize> {
    let n = height * window;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let (hi, ti) = (i / window, i % window);
        for j in 0..n {
            let (hj, tj) = (j / window, j % window);
            let dh = hi + height - 1 - hj;
            let dt = ti + window - 1 - tj;
            out.push(dh * (2 * window - 1) + dt);
        }
    }
    out
}

/// Multi-head self-attention inside each window. Scores are
/// `q k^T / sqrt(C / heads)` plus the optional mask (indexed by window
/// position within its grid) and relative bias; no attention crosses windows.
pub fn window_msa<T: Scalar>(
    tape: &Tape<T>,
    ws: &WindowSet,
    params: &AttentionParams,
    mask: Option<&Tensor<T>>,
    heads: usize,
) -> Result<WindowSet, ModelError> {
    let shape = tape.shape(ws.values);
    let [bw, n, c] = shape[..] else {
        return Err(ModelError::Shape(format!("windows must be rank 3, got {shape:?}")));
    };
    if heads == 0 || c % heads != 0 {
        return Err(ModelError::Shape(format!("{c} channels not divisible by {heads} heads")));
    }
    let hd = c / heads;
    let qkv = tape.linear(ws.values, params.qkv_weight, params.qkv_bias)?;
    let qkv = tape.reshape(qkv, &[bw, n, 3, heads, hd])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let split = |i: usize| -> Result<Var, ModelError> {
        let part = tape.narrow(qkv, 0, i, 1)?;
        Ok(tape.reshape(part, &[bw, heads, n, hd])?)
    };
    let (q, k, v) = (split(0)?, split(1)?, split(2)?);

    let scores = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
    if let Some(table) = params.rel_bias {
        let index = relative_position_index(ws.grid.height, ws.window);
        let bias = tape.gather(table, 0, &index)?;
        let bias = tape.permute(bias, &[1, 0])?;
        let bias = tape.reshape(bias, &[heads, n, n])?;
        scores = tape.add(scores, bias)?;
    }
    if let Some(mask) = mask {
        let m = mask.shape()[0];
        if mask.shape() != [m, n, n] || bw % m != 0 {
            return Err(ModelError::Shape(format!(
                "mask {:?} incompatible with {bw} windows of {n} tokens",
                mask.shape()
            )));
        }
        let mvar = tape.constant(mask.reshape(vec![m, 1, n, n])?)?;
        let grouped = tape.reshape(scores, &[bw / m, m, heads, n, n])?;
        let masked = tape.add(grouped, mvar)?;
        scores = tape.reshape(masked, &[bw, heads, n, n])?;
    }
    let attn = tape.softmax(scores, 3)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[bw, n, c])?;
    let out = tape.linear(out, params.proj_weight, params.proj_bias)?;
    Ok(WindowSet { values: out, ..*ws })
}
