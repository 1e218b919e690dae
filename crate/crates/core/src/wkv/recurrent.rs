use super::{
    add_bonus, assemble, bonus_rows, map_heads, Dims, HeadInputs, HeadOutput, KernelInputs,
    WkvOutput,
};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Step-wise evaluation: one state update and one read-out per token.
pub fn wkv_recurrent<T: Scalar>(
    inputs: &KernelInputs<T>,
    bonus: Option<&Tensor<T>>,
) -> Result<WkvOutput<T>> {
    let dims = inputs.dims()?;
    let p = bonus_rows(bonus, &dims)?;
    let heads = map_heads(&dims, |b, h| {
        let head = inputs.head(&dims, b, h, p.as_deref());
        run_head(&head, &dims, |_, _| {})
    });
    let heads = heads.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(assemble(&dims, heads))
}

/// Like [`wkv_recurrent`], also returning the RMS of the whole state
/// (all batch rows and heads) after every step.
pub fn wkv_recurrent_traced<T: Scalar>(
    inputs: &KernelInputs<T>,
    bonus: Option<&Tensor<T>>,
) -> Result<(WkvOutput<T>, Vec<T>)> {
    let dims = inputs.dims()?;
    let p = bonus_rows(bonus, &dims)?;
    let heads = map_heads(&dims, |b, h| {
        let head = inputs.head(&dims, b, h, p.as_deref());
        let mut sq = vec![T::zero(); dims.t];
        run_head(&head, &dims, |t, s| sq[t] = s.iter().map(|&x| x * x).sum()).map(|out| (out, sq))
    });
    let mut total = vec![T::zero(); dims.t];
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let (out, sq) = head?;
        for (acc, x) in total.iter_mut().zip(sq) {
            *acc = *acc + x;
        }
        outs.push(out);
    }
    let count = T::from_f64((dims.b * dims.h * dims.state_len()) as f64);
    let rms = total.into_iter().map(|ss| (ss / count).sqrt()).collect();
    Ok((assemble(&dims, outs), rms))
}

/// Runs one head, calling `on_step(t, S_t)` after each update.
pub(crate) fn run_head<T: Scalar>(
    head: &HeadInputs<'_, T>,
    dims: &Dims,
    mut on_step: impl FnMut(usize, &[T]),
) -> Result<HeadOutput<T>> {
    let (n, nv) = (dims.n, dims.nv);
    let mut s = head.s0.clone();
    let mut y = vec![T::zero(); dims.t * nv];
    let mut decay = vec![T::zero(); n];
    for t in 0..dims.t {
        let row = t * n..(t + 1) * n;
        let (r, k, a, b) = (
            &head.r[row.clone()],
            &head.k[row.clone()],
            &head.a[row.clone()],
            &head.b[row.clone()],
        );
        let v = &head.v[t * nv..(t + 1) * nv];
        for (d, &w) in decay.iter_mut().zip(&head.w[row]) {
            *d = w.exp();
        }
        let y_t = &mut y[t * nv..(t + 1) * nv];
        for i in 0..nv {
            let s_row = &mut s[i * n..(i + 1) * n];
            // (S â)_i
            let u: T = s_row.iter().zip(a).map(|(&x, &a)| x * a).sum();
            let vi = v[i];
            let mut acc = T::zero();
            for j in 0..n {
                let x = s_row[j] * decay[j] + u * b[j] + vi * k[j];
                s_row[j] = x;
                acc = acc + x * r[j];
            }
            y_t[i] = acc;
        }
        add_bonus(y_t, r, k, v, head.p);
        if !y_t.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteStep { step: t });
        }
        on_step(t, &s);
    }
    Ok(HeadOutput { y, s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wkv::{test_support::random_inputs, WkvState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_step(n: usize, p: Option<f64>) -> (KernelInputs<f64>, WkvOutput<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dims = Dims {
            b: 1,
            t: 1,
            h: 1,
            n,
            nv: n,
        };
        let inputs = random_inputs(&mut rng, dims, false);
        let bonus = p.map(|p| Tensor::new([1], vec![p]).unwrap());
        let out = wkv_recurrent(&inputs, bonus.as_ref()).unwrap();
        (inputs, out)
    }

    #[test]
    fn single_step_reads_back_outer_product() {
        for (p, factor) in [(None, 1.0), (Some(0.0), 1.0), (Some(0.7), 1.7)] {
            let (inputs, out) = single_step(4, p);
            let rk: f64 = inputs
                .r
                .data()
                .iter()
                .zip(inputs.k.data())
                .map(|(a, b)| a * b)
                .sum();
            for (y, v) in out.y.data().iter().zip(inputs.v.data()) {
                assert!((y - factor * rk * v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_keys_and_unit_decay_read_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let dims = Dims {
            b: 2,
            t: 6,
            h: 2,
            n: 3,
            nv: 4,
        };
        let mut inputs = random_inputs(&mut rng, dims, true);
        inputs.k = Tensor::zeros(inputs.k.shape().to_vec());
        inputs.w = Tensor::zeros(inputs.w.shape().to_vec());
        inputs.a_hat = Tensor::zeros(inputs.a_hat.shape().to_vec());
        let out = wkv_recurrent(&inputs, None).unwrap();
        let s0 = inputs.s0.as_ref().unwrap();
        assert_eq!(&out.state, s0);
        for b in 0..2 {
            for t in 0..6 {
                for h in 0..2 {
                    for i in 0..4 {
                        let expect: f64 = (0..3)
                            .map(|j| s0.s.at(&[b, h, i, j]) * inputs.r.at(&[b, t, h, j]))
                            .sum();
                        assert!((out.y.at(&[b, t, h, i]) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn non_finite_input_names_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dims = Dims {
            b: 1,
            t: 5,
            h: 1,
            n: 2,
            nv: 2,
        };
        let mut inputs = random_inputs(&mut rng, dims, false);
        inputs.v.data_mut()[3 * 2] = f64::NAN;
        match wkv_recurrent(&inputs, None) {
            Err(Error::NonFiniteStep { step }) => assert_eq!(step, 3),
            other => panic!("expected NonFiniteStep, got {other:?}"),
        }
    }

    #[test]
    fn traced_rms_matches_final_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let dims = Dims {
            b: 2,
            t: 9,
            h: 3,
            n: 4,
            nv: 2,
        };
        let inputs = random_inputs(&mut rng, dims, true);
        let (out, rms) = wkv_recurrent_traced(&inputs, None).unwrap();
        assert_eq!(out, wkv_recurrent(&inputs, None).unwrap());
        assert_eq!(rms.len(), 9);
        assert!((rms[8] - out.state.rms()).abs() < 1e-12);
        let _: WkvState<f64> = out.state;
    }
}
