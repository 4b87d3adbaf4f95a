//! Raw numeric kernels on flat slices. No graph bookkeeping lives here;
//! callers validate shapes first.

use super::Element;

/// Broadcast result of two shapes, right-aligned, extent-1 axes expanding.
/// Returns `None` when a pair of extents disagrees and neither is 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Row-major strides, with stride 0 on axes that broadcast (extent 1 where
/// the output extent is larger). `shape` is right-aligned against `out`.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 && out[offset + i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walks every index of `out_shape`, calling `f(out_flat, a_flat, b_flat)`.
pub(crate) fn zip_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in 0..numel {
        f(o, ia, ib);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// C[m,n] = A[m,k] . B[k,n]
pub fn matmul2d<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] . B[k,n]^T
pub(crate) fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = E::zero();
            for p in 0..n {
                acc = acc + arow[p] * brow[p];
            }
            c[i * k + j] = acc;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T . B[m,n]
pub(crate) fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose2d<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis extent, inner) products.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, max-subtracted for stability.
pub(crate) fn softmax<E: Element>(data: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![E::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = data[base];
            for s in 1..len {
                let v = data[base + s * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for s in 0..len {
                let e = (data[base + s * inner] - max).exp();
                out[base + s * inner] = e;
                sum = sum + e;
            }
            for s in 0..len {
                out[base + s * inner] = out[base + s * inner] / sum;
            }
        }
    }
    out
}

/// log(sum(exp(x))) over a flat slice, max-shifted.
pub(crate) fn logsumexp<E: Element>(data: &[E]) -> E {
    let mut max = data[0];
    for v in &data[1..] {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = E::zero();
    for v in data {
        sum = sum + (*v - max).exp();
    }
    max + sum.ln()
}
