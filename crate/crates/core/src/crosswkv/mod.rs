//! The CrossWKV layer: token mixing, low-rank data-dependent decay and
//! learning rate, text-derived receptance, the WKV kernel, group norm and a
//! gated output projection.

mod checkpoint;
mod gradcheck;
mod layer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor, XAVIER_GAIN};
use crate::wkv::Mode;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, Checkpoint, MAGIC};
pub use gradcheck::{layer_gradcheck, random_params, GradcheckReport};
pub use layer::{crosswkv_forward, forward_on_tape, kernel_inputs, LayerOutput, LayerVars};

/// Scale applied to the sigmoid output that becomes the log-decay `w`;
/// equal to `-exp(-1/2)`, so `exp(w)` stays inside `(exp(-exp(-1/2)), 1)`.
pub const DECAY_SCALE: f64 = -0.6065306597126334;

/// Lower bound of every effective decay `exp(w)`.
pub fn min_decay() -> f64 {
    DECAY_SCALE.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraRanks {
    pub w: usize,
    pub a: usize,
    pub v: usize,
    pub g: usize,
}

impl Default for LoraRanks {
    fn default() -> Self {
        Self {
            w: 64,
            a: 64,
            v: 16,
            g: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerConfig {
    pub d: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub h: usize,
    /// Key head dimension; `d == h * n`.
    pub n: usize,
    pub is_first_layer: bool,
    pub chunk: usize,
    pub mode: Mode,
    /// Requested LoRA ranks; each is clamped to the smaller side of its map.
    pub ranks: LoraRanks,
    /// Learnable group-norm scale and shift. When false they stay at 1 and 0.
    pub gn_affine: bool,
}

impl LayerConfig {
    pub fn new(d: usize, d_q: usize, d_v: usize, h: usize) -> Result<Self> {
        if h == 0 {
            return Err(Error::Config("H must be positive".into()));
        }
        let cfg = Self {
            d,
            d_q,
            d_v,
            h,
            n: d / h,
            is_first_layer: true,
            chunk: 16,
            mode: Mode::Auto,
            ranks: LoraRanks::default(),
            gn_affine: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// D=8, D_q=4, D_v=8, H=2, N=4.
    pub fn tiny() -> Self {
        Self::new(8, 4, 8, 2).expect("tiny config is valid")
    }

    pub fn with_first_layer(mut self, first: bool) -> Self {
        self.is_first_layer = first;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("D", self.d),
            ("D_q", self.d_q),
            ("D_v", self.d_v),
            ("H", self.h),
            ("N", self.n),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d != self.h * self.n {
            return Err(Error::Config(format!(
                "D={} must equal H*N={}*{}",
                self.d, self.h, self.n
            )));
        }
        if !self.d_v.is_multiple_of(self.h) {
            return Err(Error::Config(format!(
                "D_v={} not divisible by H={}",
                self.d_v, self.h
            )));
        }
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be positive".into()));
        }
        let r = self.ranks;
        if [r.w, r.a, r.v, r.g].contains(&0) {
            return Err(Error::Config("LoRA ranks must be positive".into()));
        }
        Ok(())
    }

    /// Value head dimension.
    pub fn nv(&self) -> usize {
        self.d_v / self.h
    }

    pub fn eps_gn(&self) -> f64 {
        self.n as f64 * 1e-5
    }

    pub fn rank_w(&self) -> usize {
        self.ranks.w.min(self.d)
    }

    pub fn rank_a(&self) -> usize {
        self.ranks.a.min(self.d)
    }

    pub fn rank_v(&self) -> usize {
        self.ranks.v.min(self.d).min(self.d_v)
    }

    pub fn rank_g(&self) -> usize {
        self.ranks.g.min(self.d).min(self.d_v)
    }
}

/// Low-rank map `(x · down) · up + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora<P = Tensor> {
    pub down: P,
    pub up: P,
    pub bias: P,
}

impl Lora<Vec<usize>> {
    fn shapes(d_in: usize, rank: usize, d_out: usize) -> Self {
        Self {
            down: vec![d_in, rank],
            up: vec![rank, d_out],
            bias: vec![d_out],
        }
    }
}

pub fn lora_forward<T: Scalar>(p: &Lora<Tensor<T>>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let [d_in, rank] = p.down.shape()[..] else {
        return Err(Error::shape("lora_forward (down)", p.down.shape(), &[0, 0]));
    };
    if p.up.rank() != 2 || p.up.shape()[0] != rank {
        return Err(Error::shape(
            "lora_forward (rank)",
            p.down.shape(),
            p.up.shape(),
        ));
    }
    if p.bias.shape() != [p.up.shape()[1]] {
        return Err(Error::shape(
            "lora_forward (bias)",
            p.up.shape(),
            p.bias.shape(),
        ));
    }
    if x.last_dim() != d_in {
        return Err(Error::shape(
            "lora_forward (input)",
            x.shape(),
            p.down.shape(),
        ));
    }
    let hidden = tensor::matmul(x, &p.down)?;
    tensor::add(&tensor::matmul(&hidden, &p.up)?, &p.bias)
}

/// `x + delta ⊙ mix` for each of the five mixing vectors, in one pass.
pub fn fused_addcmul<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    mixes: [&Tensor<T>; 5],
) -> Result<[Tensor<T>; 5]> {
    if x.shape() != delta.shape() {
        return Err(Error::shape("fused_addcmul", x.shape(), delta.shape()));
    }
    let d = x.last_dim();
    for mix in mixes {
        if mix.numel() != d || mix.last_dim() != d {
            return Err(Error::shape("fused_addcmul (mix)", x.shape(), mix.shape()));
        }
    }
    let mut outs: [Vec<T>; 5] = std::array::from_fn(|_| Vec::with_capacity(x.numel()));
    for (xr, dr) in x.data().chunks(d).zip(delta.data().chunks(d)) {
        for c in 0..d {
            let (xv, dv) = (xr[c], dr[c]);
            for (out, mix) in outs.iter_mut().zip(mixes) {
                out.push(xv + dv * mix.data()[c]);
            }
        }
    }
    let mut outs = outs.into_iter();
    Ok(std::array::from_fn(|_| {
        Tensor::new(x.shape().to_vec(), outs.next().expect("five streams"))
            .expect("shape preserved")
    }))
}

/// Every learnable tensor of one layer. `P` is [`Tensor`] for stored
/// parameters, [`crate::autodiff::Var`] once bound to a tape, or a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossWkvParams<P = Tensor> {
    pub mix_w: P,
    pub mix_k: P,
    pub mix_v: P,
    pub mix_a: P,
    pub mix_g: P,
    pub w_r: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
    pub lora_w: Lora<P>,
    pub lora_a: Lora<P>,
    pub lora_v: Lora<P>,
    pub lora_g: Lora<P>,
    pub k_k: P,
    pub k_a: P,
    pub r_k: P,
    pub gn_gamma: P,
    pub gn_beta: P,
}

pub const PARAM_COUNT: usize = 26;

impl<P> CrossWkvParams<P> {
    /// Named fields in a fixed order (the checkpoint order).
    pub fn fields(&self) -> [(&'static str, &P); PARAM_COUNT] {
        [
            ("mix_w", &self.mix_w),
            ("mix_k", &self.mix_k),
            ("mix_v", &self.mix_v),
            ("mix_a", &self.mix_a),
            ("mix_g", &self.mix_g),
            ("w_r", &self.w_r),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("lora_w.down", &self.lora_w.down),
            ("lora_w.up", &self.lora_w.up),
            ("lora_w.bias", &self.lora_w.bias),
            ("lora_a.down", &self.lora_a.down),
            ("lora_a.up", &self.lora_a.up),
            ("lora_a.bias", &self.lora_a.bias),
            ("lora_v.down", &self.lora_v.down),
            ("lora_v.up", &self.lora_v.up),
            ("lora_v.bias", &self.lora_v.bias),
            ("lora_g.down", &self.lora_g.down),
            ("lora_g.up", &self.lora_g.up),
            ("lora_g.bias", &self.lora_g.bias),
            ("k_k", &self.k_k),
            ("k_a", &self.k_a),
            ("r_k", &self.r_k),
            ("gn_gamma", &self.gn_gamma),
            ("gn_beta", &self.gn_beta),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut P); PARAM_COUNT] {
        [
            ("mix_w", &mut self.mix_w),
            ("mix_k", &mut self.mix_k),
            ("mix_v", &mut self.mix_v),
            ("mix_a", &mut self.mix_a),
            ("mix_g", &mut self.mix_g),
            ("w_r", &mut self.w_r),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("lora_w.down", &mut self.lora_w.down),
            ("lora_w.up", &mut self.lora_w.up),
            ("lora_w.bias", &mut self.lora_w.bias),
            ("lora_a.down", &mut self.lora_a.down),
            ("lora_a.up", &mut self.lora_a.up),
            ("lora_a.bias", &mut self.lora_a.bias),
            ("lora_v.down", &mut self.lora_v.down),
            ("lora_v.up", &mut self.lora_v.up),
            ("lora_v.bias", &mut self.lora_v.bias),
            ("lora_g.down", &mut self.lora_g.down),
            ("lora_g.up", &mut self.lora_g.up),
            ("lora_g.bias", &mut self.lora_g.bias),
            ("k_k", &mut self.k_k),
            ("k_a", &mut self.k_a),
            ("r_k", &mut self.r_k),
            ("gn_gamma", &mut self.gn_gamma),
            ("gn_beta", &mut self.gn_beta),
        ]
    }

    /// Builds a new parameter set field by field, in [`Self::fields`] order.
    pub fn try_map<Q, E>(
        &self,
        mut f: impl FnMut(&'static str, &P) -> Result<Q, E>,
    ) -> Result<CrossWkvParams<Q>, E> {
        let mix_w = f("mix_w", &self.mix_w)?;
        let mix_k = f("mix_k", &self.mix_k)?;
        let mix_v = f("mix_v", &self.mix_v)?;
        let mix_a = f("mix_a", &self.mix_a)?;
        let mix_g = f("mix_g", &self.mix_g)?;
        let w_r = f("w_r", &self.w_r)?;
        let w_k = f("w_k", &self.w_k)?;
        let w_v = f("w_v", &self.w_v)?;
        let w_o = f("w_o", &self.w_o)?;
        let mut lora = |name: [&'static str; 3], l: &Lora<P>| -> Result<Lora<Q>, E> {
            Ok(Lora {
                down: f(name[0], &l.down)?,
                up: f(name[1], &l.up)?,
                bias: f(name[2], &l.bias)?,
            })
        };
        let lora_w = lora(["lora_w.down", "lora_w.up", "lora_w.bias"], &self.lora_w)?;
        let lora_a = lora(["lora_a.down", "lora_a.up", "lora_a.bias"], &self.lora_a)?;
        let lora_v = lora(["lora_v.down", "lora_v.up", "lora_v.bias"], &self.lora_v)?;
        let lora_g = lora(["lora_g.down", "lora_g.up", "lora_g.bias"], &self.lora_g)?;
        Ok(CrossWkvParams {
            mix_w,
            mix_k,
            mix_v,
            mix_a,
            mix_g,
            w_r,
            w_k,
            w_v,
            w_o,
            lora_w,
            lora_a,
            lora_v,
            lora_g,
            k_k: f("k_k", &self.k_k)?,
            k_a: f("k_a", &self.k_a)?,
            r_k: f("r_k", &self.r_k)?,
            gn_gamma: f("gn_gamma", &self.gn_gamma)?,
            gn_beta: f("gn_beta", &self.gn_beta)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&'static str, &P) -> Q) -> CrossWkvParams<Q> {
        self.try_map(|name, p| Ok::<_, std::convert::Infallible>(f(name, p)))
            .unwrap_or_else(|never| match never {})
    }
}

impl CrossWkvParams<Vec<usize>> {
    pub fn shapes(cfg: &LayerConfig) -> Self {
        let (d, d_q, d_v) = (cfg.d, cfg.d_q, cfg.d_v);
        Self {
            mix_w: vec![1, 1, d],
            mix_k: vec![1, 1, d],
            mix_v: vec![1, 1, d],
            mix_a: vec![1, 1, d],
            mix_g: vec![1, 1, d],
            w_r: vec![d_q, d],
            w_k: vec![d, d],
            w_v: vec![d, d_v],
            w_o: vec![d_v, d],
            lora_w: Lora::shapes(d, cfg.rank_w(), d),
            lora_a: Lora::shapes(d, cfg.rank_a(), d),
            lora_v: Lora::shapes(d, cfg.rank_v(), d_v),
            lora_g: Lora::shapes(d, cfg.rank_g(), d_v),
            k_k: vec![d],
            k_a: vec![d],
            r_k: vec![d],
            gn_gamma: vec![d_v],
            gn_beta: vec![d_v],
        }
    }
}

impl CrossWkvParams {
    pub fn numel(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Whether the named field is updated by training under `cfg`.
    pub fn is_trainable(cfg: &LayerConfig, name: &str) -> bool {
        cfg.gn_affine || !name.starts_with("gn_")
    }
}

/// Xavier-uniform (gain `2^-2.5`) for projections and LoRA factors; mixing
/// vectors, `r_k`, biases and `gn_beta` start at 0; `k_k`, `k_a` and
/// `gn_gamma` at 1.
pub fn init_params(cfg: &LayerConfig, seed: u64) -> Result<CrossWkvParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(CrossWkvParams::shapes(cfg).map(|name, shape| match name {
        "k_k" | "k_a" | "gn_gamma" => Tensor::ones(shape.clone()),
        _ if shape.len() == 2 => tensor::xavier_uniform(shape[0], shape[1], XAVIER_GAIN, &mut rng),
        _ => Tensor::zeros(shape.clone()),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn decay_scale_is_minus_exp_minus_half() {
        assert!((DECAY_SCALE + (-0.5f64).exp()).abs() < 1e-15);
        assert!((min_decay() - 0.5452).abs() < 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(LayerConfig::new(8, 4, 8, 3).is_err());
        assert!(LayerConfig::new(8, 4, 6, 4).is_err());
        assert!(LayerConfig::new(8, 0, 8, 2).is_err());
        let cfg = LayerConfig::new(1024, 77, 1024, 16).unwrap();
        assert_eq!((cfg.n, cfg.nv()), (64, 64));
        assert_eq!(
            (cfg.rank_w(), cfg.rank_a(), cfg.rank_v(), cfg.rank_g()),
            (64, 64, 16, 128)
        );
        assert_eq!(cfg.eps_gn(), 64e-5);
        let tiny = LayerConfig::tiny();
        assert_eq!((tiny.rank_w(), tiny.rank_v(), tiny.rank_g()), (8, 8, 8));
    }

    #[test]
    fn lora_with_zero_up_returns_bias() {
        let mut r = rng();
        let p = Lora {
            down: Tensor::<f64>::randn([4, 2], &mut r),
            up: Tensor::zeros([2, 3]),
            bias: Tensor::randn([3], &mut r),
        };
        let y = lora_forward(&p, &Tensor::randn([2, 5, 4], &mut r)).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, p.bias.data());
        }
    }

    #[test]
    fn lora_identity_factorization() {
        let mut r = rng();
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let p = Lora {
            down: eye.clone(),
            up: eye,
            bias: Tensor::randn([3], &mut r),
        };
        let x = Tensor::randn([1, 4, 3], &mut r);
        let y = lora_forward(&p, &x).unwrap();
        let expect = tensor::add(&x, &p.bias).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn lora_matches_dense_composition() {
        let mut r = rng();
        let p = Lora {
            down: Tensor::<f64>::randn([6, 2], &mut r),
            up: Tensor::randn([2, 5], &mut r),
            bias: Tensor::randn([5], &mut r),
        };
        let x = Tensor::randn([2, 3, 6], &mut r);
        let y = lora_forward(&p, &x).unwrap();
        // dense product first, evaluated entry by entry
        for (row, out) in x.data().chunks(6).zip(y.data().chunks(5)) {
            for o in 0..5 {
                let mut acc = p.bias.data()[o];
                for i in 0..6 {
                    let w: f64 = (0..2).map(|j| p.down.at(&[i, j]) * p.up.at(&[j, o])).sum();
                    acc += row[i] * w;
                }
                assert!((acc - out[o]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn lora_rank_mismatch() {
        let p = Lora {
            down: Tensor::<f64>::zeros([4, 2]),
            up: Tensor::zeros([3, 4]),
            bias: Tensor::zeros([4]),
        };
        assert!(lora_forward(&p, &Tensor::zeros([1, 1, 4])).is_err());
    }

    #[test]
    fn addcmul_limits_and_bitwise_agreement() {
        let mut r = rng();
        let x = Tensor::randn([2, 3, 4], &mut r);
        let shifted = tensor::time_shift(&x).unwrap();
        let delta = tensor::sub(&shifted, &x).unwrap();
        let zero = Tensor::zeros([1, 1, 4]);
        let one = Tensor::ones([1, 1, 4]);
        let outs = fused_addcmul(&x, &delta, [&zero, &one, &zero, &one, &zero]).unwrap();
        assert_eq!(outs[0], x);
        assert!(outs[1].max_abs_diff(&shifted).unwrap() < 1e-15);

        let mixes: Vec<Tensor> = (0..5).map(|_| Tensor::randn([1, 1, 4], &mut r)).collect();
        let fused = fused_addcmul(&x, &delta, std::array::from_fn(|i| &mixes[i])).unwrap();
        for (out, mix) in fused.iter().zip(&mixes) {
            let naive = tensor::add(&x, &tensor::mul(&delta, mix).unwrap()).unwrap();
            assert_eq!(out, &naive);
        }
    }

    #[test]
    fn init_defaults_and_determinism() {
        let cfg = LayerConfig::tiny();
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&cfg, 4).unwrap());
        assert_eq!(a.gn_gamma, Tensor::ones([8]));
        assert_eq!(a.gn_beta, Tensor::zeros([8]));
        assert_eq!(a.k_k, Tensor::ones([8]));
        assert_eq!(a.r_k, Tensor::zeros([8]));
        assert_eq!(a.mix_g, Tensor::zeros([1, 1, 8]));
        let bound = tensor::xavier_bound(4, 8, XAVIER_GAIN);
        assert!(a.w_r.max_abs() <= bound && a.w_r.max_abs() > 0.0);
    }

    #[test]
    fn field_order_matches_map_order() {
        let shapes = CrossWkvParams::shapes(&LayerConfig::tiny());
        let mut visited = Vec::new();
        shapes.map(|name, _| visited.push(name));
        let listed: Vec<_> = shapes.fields().iter().map(|(n, _)| *n).collect();
        assert_eq!(visited, listed);
        let mut unique = listed.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), PARAM_COUNT);
    }
}
