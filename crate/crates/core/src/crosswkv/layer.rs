use super::{CrossWkvParams, LayerConfig, Lora, DECAY_SCALE};
use crate::autodiff::{Tape, Var, WkvArgs};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wkv::{KernelInputs, WkvState};

/// Handles of one layer's outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub o: Var,
    pub v_out: Var,
    pub state: Var,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub o: Tensor,
    pub v_out: Tensor,
    pub state: WkvState,
}

struct KernelStage {
    r: Var,
    w: Var,
    k: Var,
    v: Var,
    a_hat: Var,
    b_hat: Var,
    g: Var,
    v_out: Var,
    b: usize,
    t: usize,
}

impl CrossWkvParams {
    /// Puts every tensor on `tape`: trainable ones as params, the rest as
    /// constants. Pass `trainable = false` for inference.
    pub fn bind(&self, tape: &mut Tape, cfg: &LayerConfig, trainable: bool) -> CrossWkvParams<Var> {
        self.map(|name, t| {
            if trainable && Self::is_trainable(cfg, name) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

fn checked(tape: &Tape, var: Var, stage: &'static str) -> Result<Var> {
    if tape.value(var).is_finite() {
        Ok(var)
    } else {
        Err(Error::NonFinite { stage })
    }
}

fn lora(tape: &mut Tape, p: &Lora<Var>, x: Var) -> Result<Var> {
    let hidden = tape.matmul(x, p.down)?;
    let out = tape.matmul(hidden, p.up)?;
    tape.add(out, p.bias)
}

fn kernel_stage(
    tape: &mut Tape,
    cfg: &LayerConfig,
    p: &CrossWkvParams<Var>,
    x: Var,
    q: Var,
    v_first: Option<Var>,
) -> Result<KernelStage> {
    cfg.validate()?;
    let [b, t, d] = tape.shape(x)[..] else {
        return Err(Error::shape(
            "crosswkv_forward (x)",
            tape.shape(x),
            &[0, 0, cfg.d],
        ));
    };
    if d != cfg.d {
        return Err(Error::shape(
            "crosswkv_forward (x)",
            tape.shape(x),
            &[b, t, cfg.d],
        ));
    }
    let q_shape = tape.shape(q).to_vec();
    if q_shape.len() != 3 || q_shape[0] != b || q_shape[2] != cfg.d_q {
        return Err(Error::shape(
            "crosswkv_forward (q)",
            &q_shape,
            &[b, 0, cfg.d_q],
        ));
    }
    if q_shape[1] > t {
        return Err(Error::Length {
            len: q_shape[1],
            target: t,
        });
    }
    let v_first = match (cfg.is_first_layer, v_first) {
        (true, _) => None,
        (false, None) => {
            return Err(Error::Config(
                "v_first is required for a non-first layer".into(),
            ));
        }
        (false, Some(vf)) => {
            if tape.shape(vf) != [b, t, cfg.d_v] {
                return Err(Error::shape(
                    "crosswkv_forward (v_first)",
                    tape.shape(vf),
                    &[b, t, cfg.d_v],
                ));
            }
            Some(vf)
        }
    };
    let (h, n, nv) = (cfg.h, cfg.n, cfg.nv());

    let shifted = tape.time_shift(x)?;
    let delta = tape.sub(shifted, x)?;
    let delta = checked(tape, delta, "time shift")?;

    let mut mixed = [x; 5];
    for (out, mix) in mixed
        .iter_mut()
        .zip([p.mix_w, p.mix_k, p.mix_v, p.mix_a, p.mix_g])
    {
        let scaled = tape.mul(delta, mix)?;
        *out = tape.add(x, scaled)?;
    }
    let [x_w, x_k, x_v, x_a, x_g] = mixed;
    let x_g = checked(tape, x_g, "token mixing")?;

    let q_pad = tape.pad_seq(q, t)?;
    let r = tape.matmul(q_pad, p.w_r)?;
    let k = tape.matmul(x_k, p.w_k)?;
    let mut v = tape.matmul(x_v, p.w_v)?;
    let w_pre = lora(tape, &p.lora_w, x_w)?;
    let w_gate = tape.sigmoid(w_pre);
    let w = tape.scale(w_gate, DECAY_SCALE);
    let w = checked(tape, w, "projections")?;

    let a_pre = lora(tape, &p.lora_a, x_a)?;
    let a = tape.sigmoid(a_pre);
    let g = lora(tape, &p.lora_g, x_g)?;
    let g = checked(tape, g, "gate and learning rate")?;

    if let Some(vf) = v_first {
        let blend_pre = lora(tape, &p.lora_v, x_v)?;
        let blend = tape.sigmoid(blend_pre);
        v = tape.lerp(v, vf, blend)?;
        v = checked(tape, v, "value blend")?;
    }

    let kkk = tape.mul(k, p.k_k)?;
    let kkk = tape.reshape(kkk, [b, t, h, n])?;
    let kk = tape.l2_normalize_last(kkk, 1e-12);
    let one = tape.constant(Tensor::scalar(1.0));
    let a_m1 = tape.sub(a, one)?;
    let k_scaled = tape.mul(k, a_m1)?;
    let k_scaled = tape.mul(k_scaled, p.k_a)?;
    let k = tape.add(k, k_scaled)?;
    let k = checked(tape, k, "key adjustment")?;

    let r = tape.reshape(r, [b, t, h, n])?;
    let w = tape.reshape(w, [b, t, h, n])?;
    let k = tape.reshape(k, [b, t, h, n])?;
    let a = tape.reshape(a, [b, t, h, n])?;
    let v_heads = tape.reshape(v, [b, t, h, nv])?;
    let a_hat = tape.scale(kk, -1.0);
    let b_hat = tape.mul(kk, a)?;
    Ok(KernelStage {
        r,
        w,
        k,
        v: v_heads,
        a_hat,
        b_hat,
        g,
        v_out: v,
        b,
        t,
    })
}

/// Records one layer forward on `tape`. `params` come from
/// [`CrossWkvParams::bind`]; `state_in` defaults to zero.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &LayerConfig,
    params: &CrossWkvParams<Var>,
    x: Var,
    q: Var,
    v_first: Option<Var>,
    state_in: Option<Var>,
    training: bool,
) -> Result<LayerVars> {
    let st = kernel_stage(tape, cfg, params, x, q, v_first)?;
    let (b, t, h, n) = (st.b, st.t, cfg.h, cfg.n);

    let (y, state) = tape.wkv(WkvArgs {
        r: st.r,
        w: st.w,
        k: st.k,
        v: st.v,
        a_hat: st.a_hat,
        b_hat: st.b_hat,
        s0: state_in,
        bonus: None,
        mode: cfg.mode,
        training,
        chunk: cfg.chunk,
    })?;
    let y = checked(tape, y, "wkv kernel")?;
    let y = tape.reshape(y, [b, t, cfg.d_v])?;
    let normed = tape.group_norm(y, h, cfg.eps_gn(), params.gn_gamma, params.gn_beta)?;
    let normed = checked(tape, normed, "group norm")?;

    let r_k = tape.reshape(params.r_k, [h, n])?;
    let rk = tape.mul(st.r, st.k)?;
    let rk = tape.mul(rk, r_k)?;
    let per_head = tape.sum_last_keepdim(rk);
    let residual = tape.mul(per_head, st.v)?;
    let residual = tape.reshape(residual, [b, t, cfg.d_v])?;
    let o = tape.add(normed, residual)?;
    let gated = tape.mul(o, st.g)?;
    let o = tape.matmul(gated, params.w_o)?;
    let o = checked(tape, o, "output projection")?;
    Ok(LayerVars {
        o,
        v_out: st.v_out,
        state,
    })
}

/// Inference-style forward on a scratch tape.
pub fn crosswkv_forward(
    cfg: &LayerConfig,
    params: &CrossWkvParams,
    x: &Tensor,
    q: &Tensor,
    v_first: Option<&Tensor>,
    state_in: Option<&WkvState>,
    training: bool,
) -> Result<LayerOutput> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, cfg, false);
    let x = tape.constant(x.clone());
    let q = tape.constant(q.clone());
    let v_first = v_first.map(|v| tape.constant(v.clone()));
    let state_in = state_in.map(|s| tape.constant(s.s.clone()));
    let out = forward_on_tape(&mut tape, cfg, &p, x, q, v_first, state_in, training)?;
    Ok(LayerOutput {
        o: tape.value(out.o).clone(),
        v_out: tape.value(out.v_out).clone(),
        state: WkvState {
            s: tape.value(out.state).clone(),
        },
    })
}

/// The `(r, w, k, v, â, b̂)` streams the layer would feed the kernel, with no
/// initial state.
pub fn kernel_inputs(
    cfg: &LayerConfig,
    params: &CrossWkvParams,
    x: &Tensor,
    q: &Tensor,
    v_first: Option<&Tensor>,
) -> Result<KernelInputs> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, cfg, false);
    let x = tape.constant(x.clone());
    let q = tape.constant(q.clone());
    let v_first = v_first.map(|v| tape.constant(v.clone()));
    let st = kernel_stage(&mut tape, cfg, &p, x, q, v_first)?;
    let get = |v: Var| tape.value(v).clone();
    Ok(KernelInputs {
        r: get(st.r),
        w: get(st.w),
        k: get(st.k),
        v: get(st.v),
        a_hat: get(st.a_hat),
        b_hat: get(st.b_hat),
        s0: None,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::crosswkv::init_params;
    use crate::wkv::Mode;

    fn inputs(
        cfg: &LayerConfig,
        b: usize,
        t: usize,
        l: usize,
        seed: u64,
    ) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn([b, t, cfg.d], &mut rng),
            Tensor::randn([b, l, cfg.d_q], &mut rng),
            Tensor::randn([b, t, cfg.d_v], &mut rng),
        )
    }

    #[test]
    fn output_shapes() {
        let cfg = LayerConfig::tiny();
        let p = init_params(&cfg, 1).unwrap();
        let (x, q, _) = inputs(&cfg, 2, 5, 3, 2);
        let out = crosswkv_forward(&cfg, &p, &x, &q, None, None, false).unwrap();
        assert_eq!(out.o.shape(), [2, 5, 8]);
        assert_eq!(out.v_out.shape(), [2, 5, 8]);
        assert_eq!(out.state.s.shape(), [2, 2, 4, 4]);
    }

    #[test]
    fn zero_gate_annihilates_output() {
        let cfg = LayerConfig::tiny();
        let mut p = init_params(&cfg, 1).unwrap();
        p.lora_g.up = Tensor::zeros(p.lora_g.up.shape().to_vec());
        p.r_k = Tensor::ones([8]);
        let (x, q, _) = inputs(&cfg, 1, 5, 3, 2);
        let out = crosswkv_forward(&cfg, &p, &x, &q, None, None, false).unwrap();
        assert_eq!(out.o.max_abs(), 0.0);
    }

    #[test]
    fn query_longer_than_sequence_is_rejected() {
        let cfg = LayerConfig::tiny();
        let p = init_params(&cfg, 1).unwrap();
        let (x, q, _) = inputs(&cfg, 1, 3, 4, 2);
        let err = crosswkv_forward(&cfg, &p, &x, &q, None, None, false).unwrap_err();
        assert!(matches!(err, Error::Length { len: 4, target: 3 }));
    }

    #[test]
    fn first_layer_contract() {
        let cfg = LayerConfig::tiny();
        let p = init_params(&cfg, 1).unwrap();
        let (x, q, vf) = inputs(&cfg, 1, 5, 3, 2);
        let with = crosswkv_forward(&cfg, &p, &x, &q, Some(&vf), None, false).unwrap();
        let without = crosswkv_forward(&cfg, &p, &x, &q, None, None, false).unwrap();
        assert_eq!(with.o, without.o);
        assert_eq!(with.v_out, without.v_out);
        let v = crate::tensor::matmul(&x, &p.w_v).unwrap();
        assert!(with.v_out.max_abs_diff(&v).unwrap() < 1e-15);

        let later = cfg.with_first_layer(false);
        assert!(matches!(
            crosswkv_forward(&later, &p, &x, &q, None, None, false),
            Err(Error::Config(_))
        ));
        let mut p = p;
        p.lora_v.up = Tensor::zeros(p.lora_v.up.shape().to_vec());
        // sigmoid(0) blends halfway toward v_first
        let blended = crosswkv_forward(&later, &p, &x, &q, Some(&vf), None, false).unwrap();
        let half = crate::tensor::lerp(&v, &vf, &Tensor::scalar(0.5)).unwrap();
        assert!(blended.v_out.max_abs_diff(&half).unwrap() < 1e-14);
    }

    #[test]
    fn recurrent_and_chunked_layers_agree() {
        let base = LayerConfig::tiny();
        let p = init_params(&base, 7).unwrap();
        let (x, q, _) = inputs(&base, 2, 21, 4, 8);
        let rec = crosswkv_forward(
            &base.with_mode(Mode::Recurrent),
            &p,
            &x,
            &q,
            None,
            None,
            false,
        )
        .unwrap();
        for chunk in [1, 4, 16] {
            let cfg = base.with_mode(Mode::Chunked).with_chunk(chunk);
            let ch = crosswkv_forward(&cfg, &p, &x, &q, None, None, true).unwrap();
            assert!(ch.o.max_rel_err(&rec.o).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn kernel_inputs_respect_decay_and_unit_keys() {
        let cfg = LayerConfig::tiny();
        let p = init_params(&cfg, 3).unwrap();
        let (x, q, _) = inputs(&cfg, 2, 6, 2, 4);
        let ki = kernel_inputs(&cfg, &p, &x, &q, None).unwrap();
        for &w in ki.w.data() {
            let decay = w.exp();
            assert!(decay > 0.5452 && decay < 1.0);
        }
        for row in ki.a_hat.data().chunks(cfg.n) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_learning_rate_leaves_keys_unchanged() {
        let cfg = LayerConfig::tiny();
        let mut p = init_params(&cfg, 3).unwrap();
        p.k_a = Tensor::from_fn([8], |i| i as f64 - 3.0);
        // a = sigmoid(large) = 1 within rounding
        p.lora_a.bias = Tensor::full([8], 60.0);
        let (x, q, _) = inputs(&cfg, 1, 4, 2, 4);
        let ki = kernel_inputs(&cfg, &p, &x, &q, None).unwrap();
        let k = crate::tensor::matmul(&x, &p.w_k).unwrap();
        assert!(ki.k.reshape([1, 4, 8]).unwrap().max_abs_diff(&k).unwrap() < 1e-15);
    }
}
