use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{forward_on_tape, CrossWkvParams, LayerConfig};
use crate::autodiff::{finite_diff_check_all, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Worst relative gradient error for each trainable parameter.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub per_param: Vec<(&'static str, f64)>,
}

impl GradcheckReport {
    pub fn max_err(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> (&'static str, f64) {
        self.per_param.iter().copied().fold(
            ("", 0.0),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        )
    }
}

/// Parameters drawn away from init so that every path carries gradient:
/// mixes, `r_k` and biases become nonzero and the norm affine moves off 1/0.
pub fn random_params(cfg: &LayerConfig, seed: u64) -> CrossWkvParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CrossWkvParams::shapes(cfg).map(|name, shape| {
        let noise = Tensor::randn(shape.clone(), &mut rng);
        match name {
            "k_k" | "k_a" | "gn_gamma" => noise.map(|z| 1.0 + 0.3 * z),
            _ if shape.len() == 2 => noise.map(|z| z / (shape[0] as f64).sqrt()),
            _ => noise.map(|z| 0.5 * z),
        }
    })
}

/// Central-difference check of every trainable parameter of one layer on
/// random inputs `x: [b, t, D]`, `q: [b, l, D_q]` (and `v_first`, a random
/// initial state), with loss = fixed random projection of `o` and the final
/// state.
pub fn layer_gradcheck(
    cfg: &LayerConfig,
    (b, t, l): (usize, usize, usize),
    seed: u64,
    h: f64,
) -> Result<GradcheckReport> {
    let params = random_params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::randn([b, t, cfg.d], &mut rng);
    let q = Tensor::randn([b, l, cfg.d_q], &mut rng);
    let v_first = Tensor::randn([b, t, cfg.d_v], &mut rng);
    let s0 = Tensor::randn([b, cfg.h, cfg.nv(), cfg.n], &mut rng).map(|z| 0.3 * z);
    let probe_o = Tensor::randn([b, t, cfg.d], &mut rng);
    let probe_s = Tensor::randn([b, cfg.h, cfg.nv(), cfg.n], &mut rng);

    let names: Vec<&'static str> = params
        .fields()
        .iter()
        .map(|(n, _)| *n)
        .filter(|n| CrossWkvParams::is_trainable(cfg, n))
        .collect();
    let leaves: Vec<Tensor> = params
        .fields()
        .iter()
        .filter(|(n, _)| names.contains(n))
        .map(|(_, t)| (*t).clone())
        .collect();

    let errs = finite_diff_check_all(
        |tape: &mut Tape, vars: &[Var]| {
            let mut next = vars.iter().copied();
            let bound = params.map(|name, t| {
                if names.contains(&name) {
                    next.next().expect("one var per trainable field")
                } else {
                    tape.constant(t.clone())
                }
            });
            let x = tape.constant(x.clone());
            let q = tape.constant(q.clone());
            let vf = tape.constant(v_first.clone());
            let s0 = tape.constant(s0.clone());
            let out = forward_on_tape(tape, cfg, &bound, x, q, Some(vf), Some(s0), true)?;
            let po = tape.constant(probe_o.clone());
            let ps = tape.constant(probe_s.clone());
            let lo = tape.mul(out.o, po)?;
            let ls = tape.mul(out.state, ps)?;
            let lo = tape.sum(lo);
            let ls = tape.sum(ls);
            tape.add(lo, ls)
        },
        &leaves,
        h,
    )?;
    Ok(GradcheckReport {
        per_param: names.into_iter().zip(errs).collect(),
    })
}
