//! Differentiable operations recorded on a [`Tape`].

use super::dense::{broadcast_shapes, numel, Result, Tensor, TensorError};
use super::kernels::{self, batched_gemm, split_axis, MatView};
use super::scalar::Scalar;
use super::tape::{Tape, Var};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(shape)
    }

    fn broadcast_op(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape =
            broadcast_shapes(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
        let out = kernels::broadcast_binary(&ta, &tb, &out_shape, f);
        Ok((ta, tb, out))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb, out) = self.broadcast_op("add", a, b, |x, y| x + y)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        self.record(out, &[a, b], move |g| {
            vec![
                need_a.then(|| kernels::reduce_to_shape(g, &sa)),
                need_b.then(|| kernels::reduce_to_shape(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb, out) = self.broadcast_op("sub", a, b, |x, y| x - y)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        self.record(out, &[a, b], move |g| {
            vec![
                need_a.then(|| kernels::reduce_to_shape(g, &sa)),
                need_b.then(|| kernels::reduce_to_shape(&g.map(|v| -v), &sb)),
            ]
        })
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb, out) = self.broadcast_op("mul", a, b, |x, y| x * y)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        self.record(out, &[a, b], move |g| {
            let ga = need_a.then(|| {
                let full = kernels::broadcast_binary(g, &tb, g.shape(), |x, y| x * y);
                kernels::reduce_to_shape(&full, ta.shape())
            });
            let gb = need_b.then(|| {
                let full = kernels::broadcast_binary(g, &ta, g.shape(), |x, y| x * y);
                kernels::reduce_to_shape(&full, tb.shape())
            });
            vec![ga, gb]
        })
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        let c = T::of(factor);
        let out = self.value(x).map(|v| v * c);
        self.record(out, &[x], move |g| vec![Some(g.map(|v| v * c))])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let total: T = t.data().iter().copied().sum();
        self.record(Tensor::scalar(total), &[x], move |g| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    /// Arithmetic mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("mean_axis", x, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_axis" });
        }
        let t = self.value(x);
        let src = t.data();
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.record(Tensor::from_parts(out_shape, out), &[x], move |g| {
            let gd = g.data();
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for j in 0..inner {
                        dx[base + j] = gd[o * inner + j] * inv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let src_shape = t.shape().to_vec();
        let out = t.reshape(shape.to_vec())?;
        self.record(out, &[x], move |g| {
            vec![Some(g.reshape(src_shape.clone()).expect("same element count"))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.ndim();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Permutation {
                perm: perm.to_vec(),
                rank,
            });
        }
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out = kernels::permute(&t, perm);
        self.record(out, &[x], move |g| vec![Some(kernels::permute(g, &inverse))])
    }

    /// Selects `indices` along `axis`; indices may repeat.
    pub fn gather(&self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.check_axis("gather", x, axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather",
                index: bad,
                len: shape[axis],
            });
        }
        let out = kernels::gather(&self.value(x), axis, indices);
        let indices = indices.to_vec();
        self.record(out, &[x], move |g| {
            vec![Some(kernels::scatter_add(g, axis, &indices, &shape))]
        })
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let indices: Vec<usize> = (start..start + len).collect();
        self.gather(x, axis, &indices)
    }

    /// Cyclic roll along `axis`: output position `j` takes input position
    /// `(j - shift) mod n`.
    pub fn roll(&self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let shape = self.check_axis("roll", x, axis)?;
        let n = shape[axis] as isize;
        let indices: Vec<usize> = (0..n).map(|j| (j - shift).rem_euclid(n) as usize).collect();
        self.gather(x, axis, &indices)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.check_axis("concat", *first, axis)?;
        let values: Vec<Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.record(Tensor::from_parts(out_shape, out), xs, move |g| {
            let gd = g.data();
            let mut parts: Vec<Vec<T>> =
                lens.iter().map(|&len| Vec::with_capacity(outer * len * inner)).collect();
            for o in 0..outer {
                let mut cursor = o * total * inner;
                for (part, &len) in parts.iter_mut().zip(&lens) {
                    part.extend_from_slice(&gd[cursor..cursor + len * inner]);
                    cursor += len * inner;
                }
            }
            parts
                .into_iter()
                .zip(&shapes)
                .map(|(p, s)| Some(Tensor::from_parts(s.clone(), p)))
                .collect()
        })
    }

    /// Batched matrix product `[.., m, p] x [.., p, n]`; batch axes broadcast.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T` for `a: [.., m, p]`, `b: [.., n, p]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op = if tb { "matmul_nt" } else { "matmul" };
        let mismatch = || TensorError::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (pb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if p != pb {
            return Err(mismatch());
        }
        // fold the batch of `a` into rows when `b` is a plain matrix
        if sb.len() == 2 && sa.len() > 2 {
            let rows = numel(&sa[..sa.len() - 1]);
            let flat = self.reshape(a, &[rows, p])?;
            let prod = self.matmul_impl(flat, b, tb)?;
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            return self.reshape(prod, &out_shape);
        }
        let batch = broadcast_shapes(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(mismatch)?;
        let (ta, tbv) = (self.value(a), self.value(b));
        let av = MatView::new(&sa, &batch, false);
        let bv = MatView::new(&sb, &batch, tb);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let cv = MatView::new(&out_shape, &batch, false);
        let mut out = vec![T::zero(); numel(&out_shape)];
        batched_gemm((m, p, n), ta.data(), &av, tbv.data(), &bv, &mut out, &cv, T::zero());

        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        self.record(Tensor::from_parts(out_shape, out), &[a, b], move |g| {
            // dA = dC * op(B)^T, d op(B) = A^T * dC, written through each
            // operand's own view so transposed storage is handled.
            let ga = need_a.then(|| {
                let mut da = vec![T::zero(); ta.numel()];
                batched_gemm((m, n, p), g.data(), &cv, tbv.data(), &bv.transposed(), &mut da, &av, T::one());
                Tensor::from_parts(ta.shape().to_vec(), da)
            });
            let gb = need_b.then(|| {
                let mut db = vec![T::zero(); tbv.numel()];
                batched_gemm((p, m, n), ta.data(), &av.transposed(), g.data(), &cv, &mut db, &bv, T::one());
                Tensor::from_parts(tbv.shape().to_vec(), db)
            });
            vec![ga, gb]
        })
    }

    /// Affine map `x * w + bias` with `w: [in, out]`.
    pub fn linear(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, bias)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let e = *tx.shape().last().unwrap_or(&0);
        if e == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        if tg.shape() != [e] || tb.shape() != [e] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = tx.numel() / e;
        let inv_e = T::one() / T::of(e as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.numel()];
        for r in 0..rows {
            let (gd, bd) = (tg.data(), tb.data());
            let row = &tx.data()[r * e..(r + 1) * e];
            let mean = row.iter().copied().sum::<T>() * inv_e;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_e;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..e {
                let h = (row[j] - mean) * rs;
                xhat[r * e + j] = h;
                out[r * e + j] = h * gd[j] + bd[j];
            }
        }
        let shape = tx.shape().to_vec();
        let need = [self.requires_grad(x), self.requires_grad(gamma), self.requires_grad(beta)];
        self.record(Tensor::from_parts(shape.clone(), out), &[x, gamma, beta], move |g| {
            let gdat = g.data();
            let gd = tg.data();
            let mut dgamma = vec![T::zero(); e];
            let mut dbeta = vec![T::zero(); e];
            let mut dx = if need[0] { vec![T::zero(); rows * e] } else { Vec::new() };
            for r in 0..rows {
                let gr = &gdat[r * e..(r + 1) * e];
                let hr = &xhat[r * e..(r + 1) * e];
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for j in 0..e {
                    dgamma[j] = dgamma[j] + gr[j] * hr[j];
                    dbeta[j] = dbeta[j] + gr[j];
                    let dh = gr[j] * gd[j];
                    mean_dh = mean_dh + dh;
                    mean_dh_h = mean_dh_h + dh * hr[j];
                }
                if need[0] {
                    mean_dh = mean_dh * inv_e;
                    mean_dh_h = mean_dh_h * inv_e;
                    for j in 0..e {
                        let dh = gr[j] * gd[j];
                        dx[r * e + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::from_parts(shape.clone(), dx)),
                need[1].then(|| Tensor::from_parts(vec![e], dgamma)),
                need[2].then(|| Tensor::from_parts(vec![e], dbeta)),
            ]
        })
    }

    /// Softmax along `axis` with max subtraction. Entries equal to `-inf`
    /// receive zero weight.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("softmax", x, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let y = softmax_kernel(&self.value(x), outer, len, inner, false);
        let saved = y.clone();
        self.record(y, &[x], move |g| {
            let (yd, gd) = (saved.data(), g.data());
            let mut dx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                    for l in 0..len {
                        dx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(saved.shape().to_vec(), dx))]
        })
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.check_axis("log_softmax", x, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let y = softmax_kernel(&self.value(x), outer, len, inner, true);
        let saved = y.clone();
        self.record(y, &[x], move |g| {
            let (yd, gd) = (saved.data(), g.data());
            let mut dx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let total: T = (0..len).map(|l| gd[at(l)]).sum();
                    for l in 0..len {
                        dx[at(l)] = gd[at(l)] - yd[at(l)].exp() * total;
                    }
                }
            }
            vec![Some(Tensor::from_parts(saved.shape().to_vec(), dx))]
        })
    }

    /// Gaussian-error linear unit, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let th: Vec<T> = tx.data().iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::of(0.5);
        let out = tx.data().iter().zip(&th).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.record(out, &[x], move |g| {
            let (c, a) = (T::of(SQRT_2_OVER_PI), T::of(GELU_CUBIC));
            let three = T::of(3.0);
            let dx = tx
                .data()
                .iter()
                .zip(&th)
                .zip(g.data())
                .map(|((&v, &t), &gv)| {
                    let du = c * (T::one() + three * a * v * v);
                    gv * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                })
                .collect();
            vec![Some(Tensor::from_parts(tx.shape().to_vec(), dx))]
        })
    }
}

/// `tanh(sqrt(2/pi) (v + 0.044715 v^3))` through a single `exp`; saturates
/// cleanly to +-1 for large arguments.
fn gelu_tanh<T: Scalar>(v: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (v + T::of(GELU_CUBIC) * v * v * v);
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn softmax_kernel<T: Scalar>(
    x: &Tensor<T>,
    outer: usize,
    len: usize,
    inner: usize,
    log: bool,
) -> Tensor<T> {
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| src[at(l)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for l in 0..len {
                let e = (src[at(l)] - max).exp();
                out[at(l)] = e;
                total = total + e;
            }
            if log {
                let lse = total.ln();
                for l in 0..len {
                    out[at(l)] = src[at(l)] - max - lse;
                }
            } else {
                let inv = T::one() / total;
                for l in 0..len {
                    out[at(l)] = out[at(l)] * inv;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
