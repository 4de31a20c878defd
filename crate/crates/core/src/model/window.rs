//! Token-grid layout ops: segment split, window partition/merge, cyclic
//! shift and the shifted-window attention mask.

use super::ModelError;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Shape of a token grid `(batch, height, width, channels)`; height runs
/// over frequency and width over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridDims {
    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Per-segment grid of embeddings, segments folded into the batch axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub values: Var,
    pub dims: GridDims,
}

impl TokenGrid {
    pub fn new<T: Scalar>(tape: &Tape<T>, values: Var) -> Result<Self, ModelError> {
        let shape = tape.shape(values);
        let [batch, height, width, channels] = shape[..] else {
            return Err(ModelError::Shape(format!("token grid must be rank 4, got {shape:?}")));
        };
        Ok(Self {
            values,
            dims: GridDims {
                batch,
                height,
                width,
                channels,
            },
        })
    }
}

/// Windows `(batch * num_windows, height * window, channels)` plus the grid
/// they were cut from. Tokens inside a window are frequency-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSet {
    pub values: Var,
    pub grid: GridDims,
    pub window: usize,
}

impl WindowSet {
    pub fn num_windows(&self) -> usize {
        self.grid.width / self.window
    }

    pub fn tokens_per_window(&self) -> usize {
        self.grid.height * self.window
    }
}

/// `(b, c, f, d)` to `(b * segments, f, d / segments, c)`; segment `i` holds
/// frames `[i * d / N, (i + 1) * d / N)` and sits at batch index
/// `sample * N + i`.
pub fn split_segments<T: Scalar>(tape: &Tape<T>, x: Var, segments: usize) -> Result<Var, ModelError> {
    let shape = tape.shape(x);
    let [b, c, f, d] = shape[..] else {
        return Err(ModelError::Shape(format!("input must be (b, c, f, d), got {shape:?}")));
    };
    if segments == 0 || d % segments != 0 {
        return Err(ModelError::Shape(format!("{d} frames not divisible into {segments} segments")));
    }
    let w = d / segments;
    let v = tape.reshape(x, &[b, c, f, segments, w])?;
    let v = tape.permute(v, &[0, 3, 2, 4, 1])?;
    Ok(tape.reshape(v, &[b * segments, f, w, c])?)
}

pub fn window_partition<T: Scalar>(tape: &Tape<T>, grid: &TokenGrid, window: usize) -> Result<WindowSet, ModelError> {
    let GridDims {
        batch,
        height,
        width,
        channels,
    } = grid.dims;
    if window == 0 || width % window != 0 {
        return Err(ModelError::Shape(format!("grid width {width} not divisible by window {window}")));
    }
    let m = width / window;
    let v = tape.reshape(grid.values, &[batch, height, m, window, channels])?;
    let v = tape.permute(v, &[0, 2, 1, 3, 4])?;
    let v = tape.reshape(v, &[batch * m, height * window, channels])?;
    Ok(WindowSet {
        values: v,
        grid: grid.dims,
        window,
    })
}

pub fn window_merge<T: Scalar>(tape: &Tape<T>, ws: &WindowSet) -> Result<TokenGrid, ModelError> {
    let GridDims {
        batch,
        height,
        width,
        ..
    } = ws.grid;
    let m = width / ws.window;
    let expected = [batch * m, height * ws.window];
    let shape = tape.shape(ws.values);
    if shape.len() != 3 || shape[..2] != expected {
        return Err(ModelError::Shape(format!(
            "window tensor {shape:?} inconsistent with grid {:?} and window {}",
            ws.grid.shape(),
            ws.window
        )));
    }
    let c = shape[2];
    let v = tape.reshape(ws.values, &[batch, m, height, ws.window, c])?;
    let v = tape.permute(v, &[0, 2, 1, 3, 4])?;
    let v = tape.reshape(v, &[batch, height, width, c])?;
    Ok(TokenGrid {
        values: v,
        dims: GridDims {
            channels: c,
            ..ws.grid
        },
    })
}

/// Rolls the time axis so that column `j` moves to `(j - offset) mod W`.
/// Negative offsets undo a previous shift.
pub fn cyclic_shift<T: Scalar>(tape: &Tape<T>, grid: &TokenGrid, offset: isize) -> Result<TokenGrid, ModelError> {
    if offset == 0 {
        return Ok(*grid);
    }
    Ok(TokenGrid {
        values: tape.roll(grid.values, 2, -offset)?,
        dims: grid.dims,
    })
}

/// Additive mask `(num_windows, n, n)` for attention over a grid that was
/// shifted by `offset`: 0 where both tokens come from the same pre-shift
/// region, `-inf` otherwise. Only the last window mixes regions.
pub fn build_shift_mask<T: Scalar>(height: usize, width: usize, window: usize, offset: usize) -> Tensor<T> {
    let m = width / window;
    let n = height * window;
    // region label per shifted column
    let region = |col: usize| {
        if offset == 0 || col < width - window {
            0
        } else if col < width - offset {
            1
        } else {
            2
        }
    };
    let mut data = vec![T::zero(); m * n * n];
    for w in 0..m {
        for i in 0..n {
            let ci = w * window + i % window;
            for j in 0..n {
                let cj = w * window + j % window;
                if region(ci) != region(cj) {
                    data[(w * n + i) * n + j] = T::neg_infinity();
                }
            }
        }
    }
    Tensor::new(vec![m, n, n], data).expect("mask shape")
}
