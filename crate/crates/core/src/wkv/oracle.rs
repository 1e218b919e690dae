use super::{add_bonus, bonus_rows, map_heads, Dims, HeadInputs, KernelInputs};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Unrolled form of the recurrence:
///
/// ```text
/// y_t = S_0 (M_1 ⋯ M_t) r_t + Σ_{i≤t} v_i · k_iᵀ (M_{i+1} ⋯ M_t) r_t + bonus_t
/// ```
///
/// with every transition matrix materialized and multiplied out. Costs
/// `O(T² N³)` per head; meant for cross-checking the fast modes on short
/// sequences.
pub fn wkv_naive_oracle<T: Scalar>(
    inputs: &KernelInputs<T>,
    bonus: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let dims = inputs.dims()?;
    let p = bonus_rows(bonus, &dims)?;
    let heads = map_heads(&dims, |b, h| {
        let head = inputs.head(&dims, b, h, p.as_deref());
        oracle_head(&head, &dims)
    });
    let mut y = vec![T::zero(); dims.b * dims.t * dims.h * dims.nv];
    for (idx, head_y) in heads.into_iter().enumerate() {
        let (b, h) = (idx / dims.h, idx % dims.h);
        super::scatter_head(&mut y, &head_y, &dims, dims.nv, b, h);
    }
    Tensor::new([dims.b, dims.t, dims.h, dims.nv], y)
}

fn transition<T: Scalar>(head: &HeadInputs<'_, T>, n: usize, t: usize) -> Vec<T> {
    let row = t * n..(t + 1) * n;
    let (w, a, b) = (&head.w[row.clone()], &head.a[row.clone()], &head.b[row]);
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = a[i] * b[j];
        }
        m[i * n + i] = m[i * n + i] + w[i].exp();
    }
    m
}

/// `left · right` for `n × n` matrices.
fn matmul_square<T: Scalar>(left: &[T], right: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for l in 0..n {
            let x = left[i * n + l];
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + x * right[l * n + j];
            }
        }
    }
    out
}

fn mat_vec<T: Scalar>(m: &[T], x: &[T], n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            m[i * n..(i + 1) * n]
                .iter()
                .zip(x)
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect()
}

fn oracle_head<T: Scalar>(head: &HeadInputs<'_, T>, dims: &Dims) -> Vec<T> {
    let (n, nv) = (dims.n, dims.nv);
    let transitions: Vec<Vec<T>> = (0..dims.t).map(|t| transition(head, n, t)).collect();
    let mut y = vec![T::zero(); dims.t * nv];
    for t in 0..dims.t {
        let r = &head.r[t * n..(t + 1) * n];
        let y_t = &mut y[t * nv..(t + 1) * nv];
        // product = M_{i+1} ⋯ M_t, grown leftwards as i decreases
        let mut product = identity(n);
        for i in (0..=t).rev() {
            let k = &head.k[i * n..(i + 1) * n];
            let v = &head.v[i * nv..(i + 1) * nv];
            let pr = mat_vec(&product, r, n);
            let score: T = k.iter().zip(&pr).map(|(&a, &b)| a * b).sum();
            for (yi, &vi) in y_t.iter_mut().zip(v) {
                *yi = *yi + score * vi;
            }
            product = matmul_square(&transitions[i], &product, n);
        }
        // product is now M_1 ⋯ M_t: initial-state contribution
        let pr = mat_vec(&product, r, n);
        for (i, yi) in y_t.iter_mut().enumerate() {
            let s_row = &head.s0[i * n..(i + 1) * n];
            *yi = *yi + s_row.iter().zip(&pr).map(|(&a, &b)| a * b).sum();
        }
        add_bonus(
            y_t,
            r,
            &head.k[t * n..(t + 1) * n],
            &head.v[t * nv..(t + 1) * nv],
            head.p,
        );
    }
    y
}

fn identity<T: Scalar>(n: usize) -> Vec<T> {
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = T::one();
    }
    m
}
