//! Plain tensor kernels shared by the forward and backward passes.

use super::dense::{broadcast_strides, for_each_broadcast, numel, row_major_strides, Tensor};
use super::scalar::Scalar;

pub(crate) fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_parts(out_shape.to_vec(), data);
    }
    let (da, db) = (a.data(), b.data());
    // bias-style: one operand is the full output, the other a trailing block
    if a.shape() == out_shape && is_suffix(b.shape(), out_shape) && !db.is_empty() {
        let mut out = Vec::with_capacity(da.len());
        for chunk in da.chunks(db.len()) {
            out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::from_parts(out_shape.to_vec(), out);
    }
    if b.shape() == out_shape && is_suffix(a.shape(), out_shape) && !da.is_empty() {
        let mut out = Vec::with_capacity(db.len());
        for chunk in db.chunks(da.len()) {
            out.extend(da.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::from_parts(out_shape.to_vec(), out);
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let mut out = vec![T::zero(); numel(out_shape)];
    for_each_broadcast(out_shape, &sa, &sb, |i, oa, ob| out[i] = f(da[oa], db[ob]));
    Tensor::from_parts(out_shape.to_vec(), out)
}

/// Sums `grad` (shaped like the broadcast output) back down to `target`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let block = numel(target);
    if is_suffix(target, out_shape) && block > 0 {
        let mut acc = vec![T::zero(); block];
        for chunk in grad.data().chunks(block) {
            for (a, &g) in acc.iter_mut().zip(chunk) {
                *a = *a + g;
            }
        }
        return Tensor::from_parts(target.to_vec(), acc);
    }
    let st = broadcast_strides(target, out_shape);
    let zero = vec![0; out_shape.len()];
    let g = grad.data();
    let mut acc = vec![T::zero(); numel(target)];
    for_each_broadcast(out_shape, &st, &zero, |i, ot, _| acc[ot] = acc[ot] + g[i]);
    Tensor::from_parts(target.to_vec(), acc)
}

/// True when `inner`, after dropping leading size-1 axes, equals the
/// trailing axes of `outer`.
fn is_suffix(inner: &[usize], outer: &[usize]) -> bool {
    let lead = inner.iter().take_while(|&&d| d == 1).count();
    let tail = &inner[lead..];
    tail.len() <= outer.len() && outer[outer.len() - tail.len()..] == *tail
}

pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let src_strides = row_major_strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let zero = vec![0; perm.len()];
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for_each_broadcast(&out_shape, &strides, &zero, |i, o, _| out[i] = src[o]);
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn gather<T: Scalar>(x: &Tensor<T>, axis: usize, indices: &[usize]) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &idx in indices {
            let start = (o * len + idx) * inner;
            out.extend_from_slice(&src[start..start + inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    Tensor::from_parts(shape, out)
}

pub(crate) fn scatter_add<T: Scalar>(
    grad: &Tensor<T>,
    axis: usize,
    indices: &[usize],
    target: &[usize],
) -> Tensor<T> {
    let (outer, len, inner) = split_axis(target, axis);
    let g = grad.data();
    let mut out = vec![T::zero(); numel(target)];
    for o in 0..outer {
        for (k, &idx) in indices.iter().enumerate() {
            let dst = (o * len + idx) * inner;
            let src = (o * indices.len() + k) * inner;
            for j in 0..inner {
                out[dst + j] = out[dst + j] + g[src + j];
            }
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

/// Strided view of a batch of matrices inside a flat buffer.
pub(crate) struct MatView {
    pub offsets: Vec<usize>,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    /// View of an operand with shape `[batch.., r, c]`, iterated over
    /// `out_batch`. `transposed` exposes the stored matrix as `c x r`.
    pub fn new(shape: &[usize], out_batch: &[usize], transposed: bool) -> Self {
        let rank = shape.len();
        let (r, c) = (shape[rank - 2], shape[rank - 1]);
        let batch = &shape[..rank - 2];
        let mat = r * c;
        let bs = broadcast_strides(batch, out_batch);
        let zero = vec![0; out_batch.len()];
        let mut offsets = Vec::with_capacity(numel(out_batch));
        for_each_broadcast(out_batch, &bs, &zero, |_, o, _| offsets.push(o * mat));
        let (rs, cs) = if transposed { (1, c as isize) } else { (c as isize, 1) };
        Self { offsets, rs, cs }
    }

    pub fn transposed(&self) -> Self {
        Self {
            offsets: self.offsets.clone(),
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c[i] = a[i] * b[i] + beta * c[i]` over all batch entries, `m x k` times
/// `k x n`. Entries sharing a `c` offset accumulate when `beta == 1`.
pub(crate) fn batched_gemm<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    av: &MatView,
    b: &[T],
    bv: &MatView,
    c: &mut [T],
    cv: &MatView,
    beta: T,
) {
    assert_eq!(av.offsets.len(), bv.offsets.len());
    assert_eq!(av.offsets.len(), cv.offsets.len());
    if m == 0 || n == 0 {
        return;
    }
    for i in 0..av.offsets.len() {
        let (oa, ob, oc) = (av.offsets[i], bv.offsets[i], cv.offsets[i]);
        assert!(oa + span(m, k, av) <= a.len());
        assert!(ob + span(k, n, bv) <= b.len());
        assert!(oc + span(m, n, cv) <= c.len());
        // SAFETY: bounds asserted above; `c` is a distinct mutable buffer.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.as_ptr().add(oa),
                av.rs,
                av.cs,
                b.as_ptr().add(ob),
                bv.rs,
                bv.cs,
                beta,
                c.as_mut_ptr().add(oc),
                cv.rs,
                cv.cs,
            );
        }
    }
}

fn span(r: usize, c: usize, v: &MatView) -> usize {
    if r == 0 || c == 0 {
        return 0;
    }
    (r - 1) * v.rs as usize + (c - 1) * v.cs as usize + 1
}
