use super::attention::{window_msa, AttentionParams};
use super::window::{cyclic_shift, window_merge, window_partition, GridDims, TokenGrid};
use super::ModelError;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Debug, Clone, Copy)]
pub struct MergeParams {
    pub norm: NormParams,
    pub reduction: LinearParams,
}

/// Pre-norm Transformer block on windows of width `window`:
///
/// ```text
/// u   = x + unshift(merge(MSA(partition(shift(LN(x))))))
/// out = u + fc2(GELU(fc1(LN(u))))
/// ```
///
/// `offset == 0` is the local-window block; a non-zero offset shifts the
/// grid before partitioning and expects the matching `mask`.
#[allow(clippy::too_many_arguments)]
pub fn swin_block<T: Scalar>(
    tape: &Tape<T>,
    grid: &TokenGrid,
    params: &BlockParams,
    window: usize,
    offset: usize,
    heads: usize,
    mask: Option<&Tensor<T>>,
    eps: f64,
) -> Result<TokenGrid, ModelError> {
    let normed = tape.layer_norm(grid.values, params.norm1.weight, params.norm1.bias, eps)?;
    let normed = TokenGrid {
        values: normed,
        dims: grid.dims,
    };
    let shifted = cyclic_shift(tape, &normed, offset as isize)?;
    let windows = window_partition(tape, &shifted, window)?;
    let attended = window_msa(tape, &windows, &params.attn, mask, heads)?;
    let merged = window_merge(tape, &attended)?;
    let restored = cyclic_shift(tape, &merged, -(offset as isize))?;
    let u = tape.add(grid.values, restored.values)?;

    let h = tape.layer_norm(u, params.norm2.weight, params.norm2.bias, eps)?;
    let h = tape.linear(h, params.fc1.weight, params.fc1.bias)?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, params.fc2.weight, params.fc2.bias)?;
    let out = tape.add(u, h)?;
    Ok(TokenGrid {
        values: out,
        dims: grid.dims,
    })
}

/// 2x2 downsampling: cell `(i, j)` concatenates source cells `(2i, 2j)`,
/// `(2i+1, 2j)`, `(2i, 2j+1)`, `(2i+1, 2j+1)` channel-wise, then layer norm
/// and a linear map from 4C to 2C.
pub fn patch_merging<T: Scalar>(
    tape: &Tape<T>,
    grid: &TokenGrid,
    params: &MergeParams,
    eps: f64,
) -> Result<TokenGrid, ModelError> {
    let concat = gather_quads(tape, grid)?;
    let normed = tape.layer_norm(concat.values, params.norm.weight, params.norm.bias, eps)?;
    let reduced = tape.linear(normed, params.reduction.weight, params.reduction.bias)?;
    TokenGrid::new(tape, reduced)
}

/// The parity gather and channel concatenation of [`patch_merging`], before
/// normalization.
pub fn gather_quads<T: Scalar>(tape: &Tape<T>, grid: &TokenGrid) -> Result<TokenGrid, ModelError> {
    let GridDims { height, width, .. } = grid.dims;
    if height % 2 != 0 || width % 2 != 0 {
        return Err(ModelError::Shape(format!("patch merging needs even grid, got {height}x{width}")));
    }
    let evens = |n: usize| (0..n).step_by(2).collect::<Vec<_>>();
    let odds = |n: usize| (1..n).step_by(2).collect::<Vec<_>>();
    let rows_even = tape.gather(grid.values, 1, &evens(height))?;
    let rows_odd = tape.gather(grid.values, 1, &odds(height))?;
    let ee = tape.gather(rows_even, 2, &evens(width))?;
    let oe = tape.gather(rows_odd, 2, &evens(width))?;
    let eo = tape.gather(rows_even, 2, &odds(width))?;
    let oo = tape.gather(rows_odd, 2, &odds(width))?;
    let cat = tape.concat(&[ee, oe, eo, oo], 3)?;
    TokenGrid::new(tape, cat)
}

/// 1x1 patch embedding: every time-frequency bin's channel vector is mapped
/// linearly to the embedding width.
pub fn patch_embed<T: Scalar>(tape: &Tape<T>, split: Var, params: &LinearParams) -> Result<TokenGrid, ModelError> {
    let embedded = tape.linear(split, params.weight, params.bias)?;
    TokenGrid::new(tape, embedded)
}
