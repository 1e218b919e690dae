use super::{bonus_rows, gather_head, map_heads, recurrent::run_head, scatter_head, KernelInputs};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gradients of a scalar loss with respect to every kernel operand.
#[derive(Debug, Clone)]
pub struct WkvGrads<T = f64> {
    pub r: Tensor<T>,
    pub w: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub a_hat: Tensor<T>,
    pub b_hat: Tensor<T>,
    pub s0: Tensor<T>,
    /// Same shape as the bonus passed in.
    pub bonus: Option<Tensor<T>>,
}

/// Backpropagation through time for the recurrence, given the upstream
/// gradients of `y` and (optionally) of the final state.
///
/// The forward states are recomputed step-wise, so the gradient is the same
/// whichever mode produced the forward values.
pub fn wkv_backward<T: Scalar>(
    inputs: &KernelInputs<T>,
    bonus: Option<&Tensor<T>>,
    dy: &Tensor<T>,
    d_state: Option<&Tensor<T>>,
) -> Result<WkvGrads<T>> {
    let dims = inputs.dims()?;
    if dy.shape() != [dims.b, dims.t, dims.h, dims.nv] {
        return Err(Error::shape(
            "wkv_backward (dy)",
            inputs.v.shape(),
            dy.shape(),
        ));
    }
    if let Some(ds) = d_state {
        if ds.shape() != [dims.b, dims.h, dims.nv, dims.n] {
            return Err(Error::shape(
                "wkv_backward (d_state)",
                &[dims.b, dims.h, dims.nv, dims.n],
                ds.shape(),
            ));
        }
    }
    let p = bonus_rows(bonus, &dims)?;
    let (n, nv, sl) = (dims.n, dims.nv, dims.state_len());

    let heads = map_heads(&dims, |b, h| -> Result<HeadGrads<T>> {
        let head = inputs.head(&dims, b, h, p.as_deref());
        let mut states = Vec::with_capacity((dims.t + 1) * sl);
        states.extend_from_slice(&head.s0);
        run_head(&head, &dims, |_, s| states.extend_from_slice(s))?;

        let dy_h = gather_head(dy, b, h);
        let mut g = HeadGrads::zeros(dims.t, n, nv);
        let mut ds = match d_state {
            Some(ds) => ds.data()[(b * dims.h + h) * sl..(b * dims.h + h + 1) * sl].to_vec(),
            None => vec![T::zero(); sl],
        };
        let mut u = vec![T::zero(); nv];
        let mut du = vec![T::zero(); nv];

        for t in (0..dims.t).rev() {
            let row = t * n..(t + 1) * n;
            let vrow = t * nv..(t + 1) * nv;
            let (r, k, a, bh, w) = (
                &head.r[row.clone()],
                &head.k[row.clone()],
                &head.a[row.clone()],
                &head.b[row.clone()],
                &head.w[row.clone()],
            );
            let v = &head.v[vrow.clone()];
            let dyt = &dy_h[vrow.clone()];
            let s_t = &states[(t + 1) * sl..(t + 2) * sl];
            let s_prev = &states[t * sl..(t + 1) * sl];

            // read-out
            for i in 0..nv {
                for j in 0..n {
                    ds[i * n + j] = ds[i * n + j] + dyt[i] * r[j];
                    g.r[t * n + j] = g.r[t * n + j] + s_t[i * n + j] * dyt[i];
                }
            }
            if let Some(p) = head.p {
                let c: T = r.iter().zip(k).zip(p).map(|((&r, &k), &p)| r * p * k).sum();
                let gv: T = v.iter().zip(dyt).map(|(&v, &d)| v * d).sum();
                for i in 0..nv {
                    g.v[t * nv + i] = g.v[t * nv + i] + c * dyt[i];
                }
                for j in 0..n {
                    g.r[t * n + j] = g.r[t * n + j] + gv * p[j] * k[j];
                    g.k[t * n + j] = g.k[t * n + j] + gv * p[j] * r[j];
                    g.p[j] = g.p[j] + gv * r[j] * k[j];
                }
            }

            // S_t = S_{t-1} diag(d) + (S_{t-1} â) b̂ᵀ + v kᵀ
            for i in 0..nv {
                let s_row = &s_prev[i * n..(i + 1) * n];
                let ds_row = &ds[i * n..(i + 1) * n];
                u[i] = s_row.iter().zip(a).map(|(&x, &a)| x * a).sum();
                du[i] = ds_row.iter().zip(bh).map(|(&x, &b)| x * b).sum();
                g.v[t * nv + i] =
                    g.v[t * nv + i] + ds_row.iter().zip(k).map(|(&x, &k)| x * k).sum();
            }
            for j in 0..n {
                let d = w[j].exp();
                let mut dk = T::zero();
                let mut db = T::zero();
                let mut da = T::zero();
                let mut dd = T::zero();
                for i in 0..nv {
                    let x = ds[i * n + j];
                    dk = dk + x * v[i];
                    db = db + x * u[i];
                    da = da + s_prev[i * n + j] * du[i];
                    dd = dd + s_prev[i * n + j] * x;
                }
                g.k[t * n + j] = g.k[t * n + j] + dk;
                g.b[t * n + j] = db;
                g.a[t * n + j] = da;
                g.w[t * n + j] = dd * d;
                for i in 0..nv {
                    ds[i * n + j] = ds[i * n + j] * d + du[i] * a[j];
                }
            }
        }
        g.s0 = ds;
        Ok(g)
    });

    let numel = dims.b * dims.t * dims.h;
    let mut bufs = [
        vec![T::zero(); numel * n],
        vec![T::zero(); numel * n],
        vec![T::zero(); numel * n],
        vec![T::zero(); numel * nv],
        vec![T::zero(); numel * n],
        vec![T::zero(); numel * n],
    ];
    let mut s0 = Vec::with_capacity(dims.b * dims.h * sl);
    let mut dp = vec![T::zero(); dims.h * n];
    for (idx, head) in heads.into_iter().enumerate() {
        let head = head?;
        let (b, h) = (idx / dims.h, idx % dims.h);
        let parts: [(&Vec<T>, usize); 6] = [
            (&head.r, n),
            (&head.w, n),
            (&head.k, n),
            (&head.v, nv),
            (&head.a, n),
            (&head.b, n),
        ];
        for (buf, (src, width)) in bufs.iter_mut().zip(parts) {
            scatter_head(buf, src, &dims, width, b, h);
        }
        s0.extend_from_slice(&head.s0);
        for (acc, x) in dp[h * n..(h + 1) * n].iter_mut().zip(&head.p) {
            *acc = *acc + *x;
        }
    }
    let [r, w, k, v, a, bb] = bufs;
    let shape_n = [dims.b, dims.t, dims.h, n];
    let bonus_grad = match bonus.map(|p| p.shape().to_vec()) {
        Some(shape) if shape.len() == 1 => Some(Tensor::new(
            shape,
            dp.chunks(n).map(|c| c.iter().copied().sum()).collect(),
        )?),
        Some(shape) => Some(Tensor::new(shape, dp)?),
        None => None,
    };
    Ok(WkvGrads {
        r: Tensor::new(shape_n, r)?,
        w: Tensor::new(shape_n, w)?,
        k: Tensor::new(shape_n, k)?,
        v: Tensor::new([dims.b, dims.t, dims.h, nv], v)?,
        a_hat: Tensor::new(shape_n, a)?,
        b_hat: Tensor::new(shape_n, bb)?,
        s0: Tensor::new([dims.b, dims.h, nv, n], s0)?,
        bonus: bonus_grad,
    })
}

struct HeadGrads<T> {
    r: Vec<T>,
    w: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    s0: Vec<T>,
    p: Vec<T>,
}

impl<T: Scalar> HeadGrads<T> {
    fn zeros(t: usize, n: usize, nv: usize) -> Self {
        Self {
            r: vec![T::zero(); t * n],
            w: vec![T::zero(); t * n],
            k: vec![T::zero(); t * n],
            v: vec![T::zero(); t * nv],
            a: vec![T::zero(); t * n],
            b: vec![T::zero(); t * n],
            s0: Vec::new(),
            p: vec![T::zero(); n],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wkv::{test_support::random_inputs, wkv_recurrent, Dims, WkvState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Loss = Σ y ⊙ wy + Σ S_T ⊙ ws for fixed random weights.
    fn loss(
        inputs: &KernelInputs<f64>,
        p: &Tensor<f64>,
        wy: &Tensor<f64>,
        ws: &Tensor<f64>,
    ) -> f64 {
        let out = wkv_recurrent(inputs, Some(p)).unwrap();
        let a: f64 = out.y.data().iter().zip(wy.data()).map(|(a, b)| a * b).sum();
        let b: f64 = out
            .state
            .s
            .data()
            .iter()
            .zip(ws.data())
            .map(|(a, b)| a * b)
            .sum();
        a + b
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let dims = Dims {
            b: 2,
            t: 5,
            h: 2,
            n: 3,
            nv: 2,
        };
        let inputs = random_inputs(&mut rng, dims, true);
        let p = Tensor::randn([2, 3], &mut rng);
        let wy = Tensor::randn([2, 5, 2, 2], &mut rng);
        let ws = Tensor::randn([2, 2, 2, 3], &mut rng);
        let grads = wkv_backward(&inputs, Some(&p), &wy, Some(&ws)).unwrap();

        let h = 1e-5;
        let check = |analytic: &Tensor<f64>, perturb: &dyn Fn(usize, f64) -> f64| {
            for i in 0..analytic.numel() {
                let numeric = (perturb(i, h) - perturb(i, -h)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                    "index {i}: {a} vs {numeric}"
                );
            }
        };
        type Field = fn(&mut KernelInputs<f64>) -> &mut Tensor<f64>;
        let fields: [(Field, &Tensor<f64>); 6] = [
            (|x| &mut x.r, &grads.r),
            (|x| &mut x.w, &grads.w),
            (|x| &mut x.k, &grads.k),
            (|x| &mut x.v, &grads.v),
            (|x| &mut x.a_hat, &grads.a_hat),
            (|x| &mut x.b_hat, &grads.b_hat),
        ];
        for (field, analytic) in fields {
            check(analytic, &|i, e| {
                let mut x = inputs.clone();
                field(&mut x).data_mut()[i] += e;
                loss(&x, &p, &wy, &ws)
            });
        }
        check(&grads.s0, &|i, e| {
            let mut x = inputs.clone();
            let s: &mut WkvState<f64> = x.s0.as_mut().unwrap();
            s.s.data_mut()[i] += e;
            loss(&x, &p, &wy, &ws)
        });
        check(grads.bonus.as_ref().unwrap(), &|i, e| {
            let mut q = p.clone();
            q.data_mut()[i] += e;
            loss(&inputs, &q, &wy, &ws)
        });
    }

    #[test]
    fn per_head_bonus_gradient_is_reduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let dims = Dims {
            b: 1,
            t: 3,
            h: 2,
            n: 3,
            nv: 2,
        };
        let inputs = random_inputs(&mut rng, dims, false);
        let per_channel = Tensor::full([2, 3], 0.5);
        let per_head = Tensor::full([2], 0.5);
        let dy = Tensor::randn([1, 3, 2, 2], &mut rng);
        let a = wkv_backward(&inputs, Some(&per_channel), &dy, None).unwrap();
        let b = wkv_backward(&inputs, Some(&per_head), &dy, None).unwrap();
        let reduced: Vec<f64> = a
            .bonus
            .unwrap()
            .data()
            .chunks(3)
            .map(|c| c.iter().sum())
            .collect();
        let direct = b.bonus.unwrap();
        for (x, y) in reduced.iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
