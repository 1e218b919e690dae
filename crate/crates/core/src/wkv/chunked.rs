use super::{
    add_bonus, assemble, bonus_rows, map_heads, Dims, HeadInputs, HeadOutput, KernelInputs,
    WkvOutput,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Block-wise evaluation.
///
/// Within a block of `C` steps starting from state `S₀`, write
/// `Γ(j→t) = d_{j+1} ⊙ ⋯ ⊙ d_t` for the cumulative decay and
/// `u_j = S_{j-1} â_j` for the state's projection on each removal direction.
/// Unrolling the update gives
///
/// ```text
/// u_i = S₀ (Γ(·→i-1) ⊙ â_i) + Σ_{j<i} [ (b̂_j ⊙ Γ(j→i-1))·â_i ] u_j + [ (k_j ⊙ Γ(j→i-1))·â_i ] v_j
/// y_t = S₀ (Γ(·→t) ⊙ r_t)   + Σ_{j≤t} [ (b̂_j ⊙ Γ(j→t))·r_t ] u_j   + [ (k_j ⊙ Γ(j→t))·r_t ] v_j
/// ```
///
/// so the block reduces to four `C × C` score matrices, one unit-lower-
/// triangular solve for `U`, and two score-matrix products. Only the state at
/// block boundaries is ever formed. Cost is `O(T·C·(N + N_v) + T·N·N_v)`.
pub fn wkv_chunked<T: Scalar>(
    inputs: &KernelInputs<T>,
    bonus: Option<&Tensor<T>>,
    chunk: usize,
) -> Result<WkvOutput<T>> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let dims = inputs.dims()?;
    let p = bonus_rows(bonus, &dims)?;
    let heads = map_heads(&dims, |b, h| {
        let head = inputs.head(&dims, b, h, p.as_deref());
        run_head(&head, &dims, chunk)
    });
    Ok(assemble(&dims, heads))
}

/// Scratch buffers reused across blocks.
struct Block<T> {
    /// `A_b[i][j]`, `A_k[i][j]` for `j < i` (removal-direction scores)
    ab: Vec<T>,
    ak: Vec<T>,
    /// `B_b[t][j]`, `B_k[t][j]` for `j ≤ t` (receptance scores)
    bb: Vec<T>,
    bk: Vec<T>,
    /// `C × N_v`
    u: Vec<T>,
    /// decayed write key and removal key to the end of the block, `C × N`
    k_end: Vec<T>,
    b_end: Vec<T>,
    gamma: Vec<T>,
    /// cumulative decay from the block start, `(C + 1) × N`, row 0 = ones
    from_start: Vec<T>,
}

impl<T: Scalar> Block<T> {
    fn new(c: usize, n: usize, nv: usize) -> Self {
        Self {
            ab: vec![T::zero(); c * c],
            ak: vec![T::zero(); c * c],
            bb: vec![T::zero(); c * c],
            bk: vec![T::zero(); c * c],
            u: vec![T::zero(); c * nv],
            k_end: vec![T::zero(); c * n],
            b_end: vec![T::zero(); c * n],
            gamma: vec![T::zero(); n],
            from_start: vec![T::zero(); (c + 1) * n],
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T], g: &[T]) -> T {
    a.iter().zip(b).zip(g).map(|((&a, &b), &g)| a * b * g).sum()
}

fn run_head<T: Scalar>(head: &HeadInputs<'_, T>, dims: &Dims, chunk: usize) -> HeadOutput<T> {
    let (n, nv) = (dims.n, dims.nv);
    let c_max = chunk.min(dims.t);
    let mut s = head.s0.clone();
    let mut y = vec![T::zero(); dims.t * nv];
    let mut blk = Block::new(c_max, n, nv);
    let decay: Vec<T> = head.w.iter().map(|w| w.exp()).collect();

    let mut start = 0;
    while start < dims.t {
        let c = c_max.min(dims.t - start);
        let row = |j: usize| (start + j) * n..(start + j + 1) * n;

        // cumulative decay from the block start
        blk.from_start[..n].fill(T::one());
        for j in 0..c {
            let d = &decay[row(j)];
            for x in 0..n {
                blk.from_start[(j + 1) * n + x] = blk.from_start[j * n + x] * d[x];
            }
        }

        // pairwise scores, walking Γ(j→t) forward in t
        for j in 0..c {
            let kj = &head.k[row(j)];
            let bj = &head.b[row(j)];
            blk.gamma.fill(T::one());
            for t in j..c {
                if t > j {
                    let d = &decay[row(t)];
                    for (g, &dx) in blk.gamma.iter_mut().zip(d) {
                        *g = *g * dx;
                    }
                }
                let rt = &head.r[row(t)];
                blk.bk[t * c + j] = dot(kj, rt, &blk.gamma);
                blk.bb[t * c + j] = dot(bj, rt, &blk.gamma);
                if t + 1 < c {
                    let a_next = &head.a[row(t + 1)];
                    blk.ak[(t + 1) * c + j] = dot(kj, a_next, &blk.gamma);
                    blk.ab[(t + 1) * c + j] = dot(bj, a_next, &blk.gamma);
                }
            }
            for x in 0..n {
                blk.k_end[j * n + x] = kj[x] * blk.gamma[x];
                blk.b_end[j * n + x] = bj[x] * blk.gamma[x];
            }
        }

        // U: forward substitution through the strictly lower A_b
        for i in 0..c {
            let a_i = &head.a[row(i)];
            let g = &blk.from_start[i * n..(i + 1) * n];
            for e in 0..nv {
                let s_row = &s[e * n..(e + 1) * n];
                let mut acc = dot(s_row, a_i, g);
                for j in 0..i {
                    acc = acc
                        + blk.ab[i * c + j] * blk.u[j * nv + e]
                        + blk.ak[i * c + j] * head.v[(start + j) * nv + e];
                }
                blk.u[i * nv + e] = acc;
            }
        }

        // outputs
        for t in 0..c {
            let rt = &head.r[row(t)];
            let g = &blk.from_start[(t + 1) * n..(t + 2) * n];
            let y_t = &mut y[(start + t) * nv..(start + t + 1) * nv];
            for (e, ye) in y_t.iter_mut().enumerate() {
                let s_row = &s[e * n..(e + 1) * n];
                let mut acc = dot(s_row, rt, g);
                for j in 0..=t {
                    acc = acc
                        + blk.bb[t * c + j] * blk.u[j * nv + e]
                        + blk.bk[t * c + j] * head.v[(start + j) * nv + e];
                }
                *ye = acc;
            }
            add_bonus(
                y_t,
                rt,
                &head.k[row(t)],
                &head.v[(start + t) * nv..(start + t + 1) * nv],
                head.p,
            );
        }

        // carry the state to the block end
        let g_all = &blk.from_start[c * n..(c + 1) * n];
        for e in 0..nv {
            let s_row = &mut s[e * n..(e + 1) * n];
            for (x, g) in s_row.iter_mut().zip(g_all) {
                *x = *x * *g;
            }
            for j in 0..c {
                let ue = blk.u[j * nv + e];
                let ve = head.v[(start + j) * nv + e];
                let kj = &blk.k_end[j * n..(j + 1) * n];
                let bj = &blk.b_end[j * n..(j + 1) * n];
                for x in 0..n {
                    s_row[x] = s_row[x] + ue * bj[x] + ve * kj[x];
                }
            }
        }
        start += c;
    }
    HeadOutput { y, s }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wkv::{test_support::random_inputs, wkv_recurrent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chunk_of_one_matches_recurrent() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let dims = Dims {
            b: 2,
            t: 11,
            h: 2,
            n: 4,
            nv: 3,
        };
        let inputs = random_inputs(&mut rng, dims, true);
        let rec = wkv_recurrent(&inputs, None).unwrap();
        let chk = wkv_chunked(&inputs, None, 1).unwrap();
        assert!(chk.y.max_abs_diff(&rec.y).unwrap() <= 1e-12);
        assert!(chk.state.s.max_abs_diff(&rec.state.s).unwrap() <= 1e-12);
    }

    #[test]
    fn ragged_tail_matches_recurrent() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dims = Dims {
            b: 1,
            t: 100,
            h: 2,
            n: 8,
            nv: 8,
        };
        let inputs = random_inputs(&mut rng, dims, true);
        let p = Tensor::new([2], vec![0.4, 1.1]).unwrap();
        let rec = wkv_recurrent(&inputs, Some(&p)).unwrap();
        let chk = wkv_chunked(&inputs, Some(&p), 16).unwrap();
        assert!(chk.y.max_rel_err(&rec.y).unwrap() <= 1e-6);
        assert!(chk.state.s.max_rel_err(&rec.state.s).unwrap() <= 1e-6);
    }

    #[test]
    fn chunk_sizes_agree_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let dims = Dims {
            b: 1,
            t: 70,
            h: 1,
            n: 6,
            nv: 5,
        };
        let inputs = random_inputs(&mut rng, dims, false);
        let outs: Vec<_> = [2, 4, 16, 64]
            .iter()
            .map(|&c| wkv_chunked(&inputs, None, c).unwrap())
            .collect();
        for a in &outs {
            for b in &outs {
                assert!(a.y.max_rel_err(&b.y).unwrap() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_chunk_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let dims = Dims {
            b: 1,
            t: 3,
            h: 1,
            n: 2,
            nv: 2,
        };
        let inputs = random_inputs(&mut rng, dims, false);
        assert!(matches!(
            wkv_chunked(&inputs, None, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn f32_agrees_with_f64_recurrent() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let dims = Dims {
            b: 1,
            t: 40,
            h: 2,
            n: 8,
            nv: 8,
        };
        let inputs = random_inputs(&mut rng, dims, false);
        let rec = wkv_recurrent(&inputs, None).unwrap();
        let chk = wkv_chunked(&inputs.cast::<f32>(), None, 16).unwrap();
        assert!(chk.y.cast::<f64>().max_rel_err(&rec.y).unwrap() <= 1e-3);
    }
}
