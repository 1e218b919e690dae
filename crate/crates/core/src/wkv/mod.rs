//! The RWKV-7 WKV recurrence in three interchangeable execution modes.
//!
//! Every mode consumes the same [`KernelInputs`] and, per batch row `b` and
//! head `h`, evolves an `N_v × N` state (value rows, key columns):
//!
//! ```text
//! M_t = diag(exp(w_t)) + â_t b̂_tᵀ
//! S_t = S_{t-1} M_t + v_t k_tᵀ
//! y_t = S_t r_t + (r_t · (p ⊙ k_t)) v_t
//! ```
//!
//! [`wkv_recurrent`] steps through time, [`wkv_chunked`] evaluates blocks of
//! steps with block-level matrix products, and [`wkv_naive_oracle`] expands
//! the products of transition matrices explicitly (quadratic in `T`).

mod backward;
mod chunked;
mod oracle;
mod recurrent;
mod stats;
mod tracking;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use backward::{wkv_backward, WkvGrads};
pub use chunked::wkv_chunked;
pub use oracle::wkv_naive_oracle;
pub use recurrent::{wkv_recurrent, wkv_recurrent_traced};
pub use stats::{spectral_norm, stable_rank, StateStats};
pub use tracking::{
    compose_transpositions, random_transpositions, s_n_tracking_demo, transposition_words,
    Permutation, TrackingResult,
};

/// Longest sequence that inference runs through the step-wise kernel.
pub const RECURRENT_MAX_LEN: usize = 64;

pub const DEFAULT_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Auto,
    Recurrent,
    Chunked,
}

impl Mode {
    pub fn tag(self) -> u8 {
        match self {
            Mode::Auto => 0,
            Mode::Recurrent => 1,
            Mode::Chunked => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Mode::Auto),
            1 => Some(Mode::Recurrent),
            2 => Some(Mode::Chunked),
            _ => None,
        }
    }

    /// Concrete kernel for a sequence of length `t`.
    pub fn resolve(self, training: bool, t: usize) -> Mode {
        match self {
            Mode::Auto if !training && t <= RECURRENT_MAX_LEN => Mode::Recurrent,
            Mode::Auto => Mode::Chunked,
            explicit => explicit,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Mode::Auto),
            "recurrent" => Ok(Mode::Recurrent),
            "chunked" => Ok(Mode::Chunked),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Per-head recurrent memory, `[B, H, N_v, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WkvState<T = f64> {
    pub s: Tensor<T>,
}

impl<T: Scalar> WkvState<T> {
    pub fn zeros(b: usize, h: usize, nv: usize, n: usize) -> Self {
        Self {
            s: Tensor::zeros([b, h, nv, n]),
        }
    }

    pub fn bytes(&self) -> usize {
        self.s.numel() * std::mem::size_of::<T>()
    }

    pub fn rms(&self) -> T {
        self.s.rms()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub n: usize,
    pub nv: usize,
}

impl Dims {
    pub fn state_len(&self) -> usize {
        self.nv * self.n
    }
}

/// The seven operands of every WKV mode.
///
/// `w` is the log-decay (entries ≤ 0); `a_hat`/`b_hat` are the removal
/// direction and its scaled counterpart of the rank-1 transition term.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelInputs<T = f64> {
    pub r: Tensor<T>,
    pub w: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub a_hat: Tensor<T>,
    pub b_hat: Tensor<T>,
    pub s0: Option<WkvState<T>>,
}

impl<T: Scalar> KernelInputs<T> {
    pub fn dims(&self) -> Result<Dims> {
        let [b, t, h, n] = self.r.shape()[..] else {
            return Err(Error::shape("wkv inputs (r)", self.r.shape(), &[]));
        };
        for x in [&self.w, &self.k, &self.a_hat, &self.b_hat] {
            if x.shape() != self.r.shape() {
                return Err(Error::shape("wkv inputs", self.r.shape(), x.shape()));
            }
        }
        let [vb, vt, vh, nv] = self.v.shape()[..] else {
            return Err(Error::shape(
                "wkv inputs (v)",
                self.r.shape(),
                self.v.shape(),
            ));
        };
        if (vb, vt, vh) != (b, t, h) {
            return Err(Error::shape(
                "wkv inputs (v)",
                self.r.shape(),
                self.v.shape(),
            ));
        }
        if let Some(s0) = &self.s0 {
            if s0.s.shape() != [b, h, nv, n] {
                return Err(Error::shape(
                    "wkv inputs (s0)",
                    &[b, h, nv, n],
                    s0.s.shape(),
                ));
            }
        }
        Ok(Dims { b, t, h, n, nv })
    }

    pub fn cast<U: Scalar>(&self) -> KernelInputs<U> {
        KernelInputs {
            r: self.r.cast(),
            w: self.w.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            a_hat: self.a_hat.cast(),
            b_hat: self.b_hat.cast(),
            s0: self.s0.as_ref().map(|s| WkvState { s: s.s.cast() }),
        }
    }

    /// Steps `[start, start + len)` of every stream, with `s0` as given.
    pub fn slice_time(&self, start: usize, len: usize, s0: Option<WkvState<T>>) -> Result<Self> {
        use crate::tensor::narrow;
        Ok(Self {
            r: narrow(&self.r, 1, start, len)?,
            w: narrow(&self.w, 1, start, len)?,
            k: narrow(&self.k, 1, start, len)?,
            v: narrow(&self.v, 1, start, len)?,
            a_hat: narrow(&self.a_hat, 1, start, len)?,
            b_hat: narrow(&self.b_hat, 1, start, len)?,
            s0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WkvOutput<T = f64> {
    /// `[B, T, H, N_v]`
    pub y: Tensor<T>,
    pub state: WkvState<T>,
}

/// Runs the kernel selected by `mode` (see [`Mode::resolve`]).
pub fn dispatch<T: Scalar>(
    inputs: &KernelInputs<T>,
    bonus: Option<&Tensor<T>>,
    mode: Mode,
    training: bool,
    chunk: usize,
) -> Result<WkvOutput<T>> {
    let dims = inputs.dims()?;
    match mode.resolve(training, dims.t) {
        Mode::Recurrent => wkv_recurrent(inputs, bonus),
        _ => wkv_chunked(inputs, bonus, chunk),
    }
}

/// `diag(d) + â b̂ᵀ` as an `N × N` tensor.
pub fn transition_matrix<T: Scalar>(
    d: &Tensor<T>,
    a_hat: &Tensor<T>,
    b_hat: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = d.numel();
    if a_hat.numel() != n || b_hat.numel() != n {
        return Err(Error::shape("transition_matrix", d.shape(), a_hat.shape()));
    }
    let (dd, a, b) = (d.data(), a_hat.data(), b_hat.data());
    Ok(Tensor::from_fn([n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let diag = if i == j { dd[i] } else { T::zero() };
        diag + a[i] * b[j]
    }))
}

/// Bonus weights expanded to `[H * N]`, from either `[H]` or `[H, N]`.
fn bonus_rows<T: Scalar>(bonus: Option<&Tensor<T>>, dims: &Dims) -> Result<Option<Vec<T>>> {
    let Some(p) = bonus else { return Ok(None) };
    match p.shape() {
        [h] if *h == dims.h => Ok(Some(
            p.data()
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, dims.n))
                .collect(),
        )),
        [h, n] if *h == dims.h && *n == dims.n => Ok(Some(p.data().to_vec())),
        other => Err(Error::shape("wkv bonus", other, &[dims.h, dims.n])),
    }
}

/// Copies head `(b, h)` of a `[B, T, H, X]` tensor into a contiguous `T × X` buffer.
fn gather_head<T: Scalar>(x: &Tensor<T>, b: usize, h: usize) -> Vec<T> {
    let [_, t, hh, xd] = x.shape()[..] else {
        unreachable!("validated by dims()")
    };
    let data = x.data();
    let mut out = Vec::with_capacity(t * xd);
    for ti in 0..t {
        let base = ((b * t + ti) * hh + h) * xd;
        out.extend_from_slice(&data[base..base + xd]);
    }
    out
}

fn scatter_head<T: Scalar>(
    dst: &mut [T],
    src: &[T],
    dims: &Dims,
    width: usize,
    b: usize,
    h: usize,
) {
    for ti in 0..dims.t {
        let base = ((b * dims.t + ti) * dims.h + h) * width;
        dst[base..base + width].copy_from_slice(&src[ti * width..(ti + 1) * width]);
    }
}

/// Contiguous per-head operands.
pub(crate) struct HeadInputs<'a, T> {
    pub r: Vec<T>,
    pub w: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    /// `N_v × N`
    pub s0: Vec<T>,
    /// `N`, when a bonus is present.
    pub p: Option<&'a [T]>,
}

impl<T: Scalar> KernelInputs<T> {
    pub(crate) fn head<'a>(
        &self,
        dims: &Dims,
        b: usize,
        h: usize,
        bonus: Option<&'a [T]>,
    ) -> HeadInputs<'a, T> {
        let s0 = match &self.s0 {
            Some(s) => {
                let len = dims.state_len();
                let off = (b * dims.h + h) * len;
                s.s.data()[off..off + len].to_vec()
            }
            None => vec![T::zero(); dims.state_len()],
        };
        HeadInputs {
            r: gather_head(&self.r, b, h),
            w: gather_head(&self.w, b, h),
            k: gather_head(&self.k, b, h),
            v: gather_head(&self.v, b, h),
            a: gather_head(&self.a_hat, b, h),
            b: gather_head(&self.b_hat, b, h),
            s0,
            p: bonus.map(|p| &p[h * dims.n..(h + 1) * dims.n]),
        }
    }
}

/// Runs `f` on every `(b, h)` pair, in parallel when the current rayon pool
/// has more than one thread. Results come back in `(b, h)` order.
pub(crate) fn map_heads<R: Send>(dims: &Dims, f: impl Fn(usize, usize) -> R + Sync) -> Vec<R> {
    let pairs: Vec<(usize, usize)> = (0..dims.b)
        .flat_map(|b| (0..dims.h).map(move |h| (b, h)))
        .collect();
    if rayon::current_num_threads() > 1 && pairs.len() > 1 {
        pairs.par_iter().map(|&(b, h)| f(b, h)).collect()
    } else {
        pairs.iter().map(|&(b, h)| f(b, h)).collect()
    }
}

/// Per-head result: `y` (`T × N_v`) and final state (`N_v × N`).
pub(crate) struct HeadOutput<T> {
    pub y: Vec<T>,
    pub s: Vec<T>,
}

pub(crate) fn assemble<T: Scalar>(dims: &Dims, heads: Vec<HeadOutput<T>>) -> WkvOutput<T> {
    let mut y = vec![T::zero(); dims.b * dims.t * dims.h * dims.nv];
    let mut s = Vec::with_capacity(dims.b * dims.h * dims.state_len());
    for (idx, head) in heads.into_iter().enumerate() {
        let (b, h) = (idx / dims.h, idx % dims.h);
        scatter_head(&mut y, &head.y, dims, dims.nv, b, h);
        s.extend_from_slice(&head.s);
    }
    WkvOutput {
        y: Tensor::new([dims.b, dims.t, dims.h, dims.nv], y).expect("consistent dims"),
        state: WkvState {
            s: Tensor::new([dims.b, dims.h, dims.nv, dims.n], s).expect("consistent dims"),
        },
    }
}

/// Adds the bonus `(r · (p ⊙ k)) v` for one step to `y`.
#[inline]
pub(crate) fn add_bonus<T: Scalar>(y: &mut [T], r: &[T], k: &[T], v: &[T], p: Option<&[T]>) {
    if let Some(p) = p {
        let c: T = r.iter().zip(k).zip(p).map(|((&r, &k), &p)| r * p * k).sum();
        for (yi, &vi) in y.iter_mut().zip(v) {
            *yi = *yi + c * vi;
        }
    }
}

/// Random inputs satisfying the kernel's stability preconditions:
/// `w ≤ 0`, unit `â`, `b̂ = -â ⊙ α` with `α ∈ [0, 2]`.
pub fn random_inputs<R: rand::Rng + ?Sized>(
    rng: &mut R,
    dims: Dims,
    with_state: bool,
) -> KernelInputs<f64> {
    let Dims { b, t, h, n, nv } = dims;
    let shape = [b, t, h, n];
    let r = Tensor::randn(shape, rng);
    let k = Tensor::randn(shape, rng).map(|x| 0.5 * x);
    let v = Tensor::randn([b, t, h, nv], rng);
    let w = Tensor::uniform(shape, -0.6, -0.01, rng);
    let kk = crate::tensor::l2_normalize_last(&Tensor::randn(shape, rng), 1e-12);
    let alpha: Tensor<f64> = Tensor::uniform(shape, 0.0, 2.0, rng);
    let a_hat = kk.map(|x| -x);
    let b_hat = crate::tensor::mul(&kk, &alpha).unwrap();
    let s0 = with_state.then(|| WkvState {
        s: Tensor::randn([b, h, nv, n], rng).map(|x| 0.3 * x),
    });
    KernelInputs {
        r,
        w,
        k,
        v,
        a_hat,
        b_hat,
        s0,
    }
}
