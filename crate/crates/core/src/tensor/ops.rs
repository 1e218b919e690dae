use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when read as if broadcast to `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[lead + i] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Walks every index of `out` in row-major order, calling `f(out_offset, offsets)`
/// with the matching offset into each strided operand.
fn walk_broadcast<const K: usize>(
    out: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let mut index = vec![0usize; rank];
    let mut offsets = [0usize; K];
    for flat in 0..numel {
        f(flat, offsets);
        // odometer increment
        let mut axis = rank;
        while axis > 0 {
            axis -= 1;
            index[axis] += 1;
            for (o, s) in offsets.iter_mut().zip(&strides) {
                *o += s[axis];
            }
            if index[axis] < out[axis] {
                break;
            }
            for (o, s) in offsets.iter_mut().zip(&strides) {
                *o -= s[axis] * out[axis];
            }
            index[axis] = 0;
        }
    }
}

fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out =
        broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::shape(op, &a.shape, &b.shape))?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![T::zero(); out.iter().product()];
    walk_broadcast(&out, [&sa, &sb], |i, [oa, ob]| {
        data[i] = f(a.data[oa], b.data[ob]);
    });
    Ok(Tensor { shape: out, data })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// Sums `g` down to `shape`, undoing a broadcast from `shape` to `g.shape()`.
pub fn sum_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape == shape {
        return Ok(g.clone());
    }
    match broadcast_shape(shape, &g.shape) {
        Some(out) if out == g.shape => {}
        _ => return Err(Error::shape("sum_to_shape", &g.shape, shape)),
    }
    let strides = broadcast_strides(shape, &g.shape);
    let mut data = vec![T::zero(); shape.iter().product()];
    walk_broadcast(&g.shape, [&strides], |i, [o]| {
        data[o] = data[o] + g.data[i];
    });
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// `c += a · b` for row-major `a: m×k`, `b: k×p`, `c: m×p`.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

/// Batched matrix product `[..., M, K] · [..., K, P] -> [..., M, P]` with
/// broadcast batch axes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let err = || Error::shape("matmul", &a.shape, &b.shape);
    if a.rank() < 2 || b.rank() < 2 {
        return Err(err());
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (k2, p) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != k2 {
        return Err(err());
    }
    let batch_a = &a.shape[..a.rank() - 2];
    let batch_b = &b.shape[..b.rank() - 2];

    // Weight matrices: fold all batch axes of `a` into its rows.
    if batch_b.iter().all(|&d| d == 1) {
        let rows = a.numel() / k;
        let mut data = vec![T::zero(); rows * p];
        gemm_acc(&a.data, &b.data, &mut data, rows, k, p);
        let mut shape = a.shape.clone();
        if b.rank() > a.rank() {
            shape = [vec![1; b.rank() - a.rank()], shape].concat();
        }
        let r = shape.len();
        shape[r - 1] = p;
        return Ok(Tensor { shape, data });
    }

    let batch = broadcast_shape(batch_a, batch_b).ok_or_else(err)?;
    let sa = broadcast_strides(batch_a, &batch);
    let sb = broadcast_strides(batch_b, &batch);
    let nb: usize = batch.iter().product();
    let mut data = vec![T::zero(); nb * m * p];
    walk_broadcast(&batch, [&sa, &sb], |i, [oa, ob]| {
        gemm_acc(
            &a.data[oa * m * k..(oa + 1) * m * k],
            &b.data[ob * k * p..(ob + 1) * k * p],
            &mut data[i * m * p..(i + 1) * m * p],
            m,
            k,
            p,
        );
    });
    let mut shape = batch;
    shape.extend([m, p]);
    Ok(Tensor { shape, data })
}

/// Swaps the last two axes.
pub fn transpose_last2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 {
        return Err(Error::shape("transpose_last2", &a.shape, &[]));
    }
    let r = a.rank();
    let (m, n) = (a.shape[r - 2], a.shape[r - 1]);
    let mut data = vec![T::zero(); a.numel()];
    for (src, dst) in a.data.chunks(m * n).zip(data.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.swap(r - 2, r - 1);
    Ok(Tensor { shape, data })
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// `a + t·(b − a)`, broadcasting all three operands.
pub fn lerp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    add(a, &mul(t, &sub(b, a)?)?)
}

/// Divides every trailing-axis vector by `max(‖v‖₂, eps)`.
pub fn l2_normalize_last<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let n = x.last_dim();
    let mut data = x.data.clone();
    for row in data.chunks_mut(n) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        for v in row {
            *v = *v / norm;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Group normalization over the trailing axis: each contiguous group of
/// `C / groups` channels is standardized with its own population statistics,
/// then scaled by `gamma` and shifted by `beta`.
pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    eps: T,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if eps <= T::zero() {
        return Err(Error::Config("group_norm: eps must be positive".into()));
    }
    if gamma.shape != [c] || beta.shape != [c] {
        return Err(Error::shape("group_norm", &x.shape, &gamma.shape));
    }
    let gs = c / groups;
    let inv_gs = T::from_f64(1.0 / gs as f64);
    let mut data = x.data.clone();
    for row in data.chunks_mut(c) {
        for (g, group) in row.chunks_mut(gs).enumerate() {
            let mean = group.iter().copied().sum::<T>() * inv_gs;
            let var = group.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_gs;
            let inv_std = T::one() / (var + eps).sqrt();
            for (j, v) in group.iter_mut().enumerate() {
                let ch = g * gs + j;
                *v = (*v - mean) * inv_std * gamma.data[ch] + beta.data[ch];
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

fn rank3<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape[..] {
        [b, t, d] => Ok((b, t, d)),
        _ => Err(Error::shape(op, &x.shape, &[])),
    }
}

/// One-step delay along axis 1 of `[B, T, D]`, zero-filling the first step.
pub fn time_shift<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, t, d) = rank3("time_shift", x)?;
    let mut data = vec![T::zero(); x.numel()];
    for bi in 0..b {
        let base = bi * t * d;
        data[base + d..base + t * d].copy_from_slice(&x.data[base..base + (t - 1) * d]);
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Zero-pads `[B, L, Dq]` along axis 1 to `[B, target_len, Dq]`.
pub fn pad_seq<T: Scalar>(q: &Tensor<T>, target_len: usize) -> Result<Tensor<T>> {
    let (b, l, d) = rank3("pad_seq", q)?;
    if l > target_len {
        return Err(Error::Length {
            len: l,
            target: target_len,
        });
    }
    let mut data = vec![T::zero(); b * target_len * d];
    for bi in 0..b {
        data[bi * target_len * d..bi * target_len * d + l * d]
            .copy_from_slice(&q.data[bi * l * d..(bi + 1) * l * d]);
    }
    Ok(Tensor {
        shape: vec![b, target_len, d],
        data,
    })
}

/// `[..., N] -> [..., 1]` sum over the trailing axis.
pub fn sum_last_keepdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let data = x
        .data
        .chunks(n)
        .map(|row| row.iter().copied().sum())
        .collect();
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = 1;
    Tensor { shape, data }
}

pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut data = x.data.clone();
    for row in data.chunks_mut(n) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// `len` entries of `axis` starting at `start`.
pub fn narrow<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape[axis] {
        return Err(Error::shape("narrow", &x.shape, &[axis, start, len]));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let dim = x.shape[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor { shape, data })
}

/// Concatenates along `axis`; all other axes must agree.
pub fn cat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("cat: no tensors".into()))?;
    for p in parts {
        let same_rank = p.rank() == first.rank() && axis < p.rank();
        let agree = same_rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !agree {
            return Err(Error::shape("cat", &first.shape, &p.shape));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    Ok(Tensor { shape, data })
}
