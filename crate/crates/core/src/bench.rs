//! Mode-equivalence harness and sequence-length scaling benchmarks.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};
use crate::wkv::{
    map_heads, random_inputs, wkv_chunked, wkv_naive_oracle, wkv_recurrent, Dims, KernelInputs,
};

pub const CSV_HEADER: &str = "mode,T,wall_ms,state_bytes,peak_alloc_proxy,threads,dtype";

/// Analytic FLOP estimate `13·T·H·N` for one layer's WKV stage.
pub fn flops_estimate(t: usize, h: usize, n: usize) -> u64 {
    13 * (t * h * n) as u64
}

// ---------------------------------------------------------------------------
// equivalence

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceConfig {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub n: usize,
    pub chunks: Vec<usize>,
    pub with_state: bool,
    pub with_bonus: bool,
    pub seed: u64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            b: 2,
            t: 37,
            h: 2,
            n: 8,
            chunks: vec![1, 2, 4, 16],
            with_state: true,
            with_bonus: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub dtype: DType,
    /// `(pair, max relative error)`, recurrent↔oracle first.
    pub pairs: Vec<(String, f64)>,
}

impl EquivalenceReport {
    pub fn oracle_err(&self) -> f64 {
        self.pairs[0].1
    }

    pub fn max_err(&self) -> f64 {
        self.pairs.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    /// First pair whose error exceeds `tol` (NaN counts as a breach).
    pub fn breach(&self, tol: f64) -> Option<&(String, f64)> {
        self.pairs.iter().find(|(_, e)| e.is_nan() || *e > tol)
    }
}

/// Default pass tolerance for each dtype.
pub fn equivalence_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-6,
        DType::F32 => 1e-3,
    }
}

/// Runs the recurrent, oracle and chunked kernels on the same random inputs
/// in `dtype` and compares the outputs and final states against recurrent.
pub fn equivalence(cfg: &EquivalenceConfig, dtype: DType) -> Result<EquivalenceReport> {
    if cfg.chunks.is_empty() {
        return Err(Error::Config("at least one chunk size is required".into()));
    }
    let dims = Dims {
        b: cfg.b,
        t: cfg.t,
        h: cfg.h,
        n: cfg.n,
        nv: cfg.n,
    };
    if [dims.b, dims.t, dims.h, dims.n].contains(&0) {
        return Err(Error::Config(format!(
            "all dims must be positive, got {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs = random_inputs(&mut rng, dims, cfg.with_state);
    let bonus = cfg
        .with_bonus
        .then(|| Tensor::<f64>::randn([cfg.h, cfg.n], &mut rng).map(|x| 0.5 * x));
    let pairs = match dtype {
        DType::F64 => compare_modes(&inputs, bonus.as_ref(), &cfg.chunks)?,
        DType::F32 => compare_modes(
            &inputs.cast::<f32>(),
            bonus.map(|b| b.cast()).as_ref(),
            &cfg.chunks,
        )?,
    };
    Ok(EquivalenceReport { dtype, pairs })
}

fn compare_modes<T: Scalar>(
    inputs: &KernelInputs<T>,
    bonus: Option<&Tensor<T>>,
    chunks: &[usize],
) -> Result<Vec<(String, f64)>> {
    let rec = wkv_recurrent(inputs, bonus)?;
    let oracle = wkv_naive_oracle(inputs, bonus)?;
    let mut pairs = vec![(
        "recurrent-oracle".to_string(),
        oracle.max_rel_err(&rec.y)?.as_f64(),
    )];
    for &c in chunks {
        let out = wkv_chunked(inputs, bonus, c)?;
        let err = out
            .y
            .max_rel_err(&rec.y)?
            .max(out.state.s.max_rel_err(&rec.state.s)?);
        pairs.push((format!("recurrent-chunked{c}"), err.as_f64()));
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// timing

/// Median wall time in milliseconds of `runs` calls to `f`, after one
/// discarded warm-up call.
pub fn median_ms<R>(runs: usize, mut f: impl FnMut() -> R) -> f64 {
    std::hint::black_box(f());
    let mut times: Vec<f64> = (0..runs.max(1)).map(|_| time_ms(&mut f)).collect();
    median(&mut times)
}

fn time_ms<R>(f: &mut impl FnMut() -> R) -> f64 {
    let start = Instant::now();
    std::hint::black_box(f());
    start.elapsed().as_secs_f64() * 1e3
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mode: String,
    pub t: usize,
    pub wall_ms: f64,
    pub state_bytes: usize,
    pub peak_alloc_proxy: usize,
    pub threads: usize,
    pub dtype: DType,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{},{}",
            self.mode,
            self.t,
            self.wall_ms,
            self.state_bytes,
            self.peak_alloc_proxy,
            self.threads,
            self.dtype
        )
    }
}

pub fn write_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{CSV_HEADER}").map_err(io)?;
    for r in records {
        writeln!(f, "{}", r.csv_row()).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Softmax,
    None,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown baseline `{other}` (softmax|none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingConfig {
    pub b: usize,
    pub h: usize,
    pub n: usize,
    pub chunk: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            b: 1,
            h: 4,
            n: 32,
            chunk: 16,
            runs: 5,
            seed: 0,
        }
    }
}

impl ScalingConfig {
    fn dims(&self, t: usize) -> Dims {
        Dims {
            b: self.b,
            t,
            h: self.h,
            n: self.n,
            nv: self.n,
        }
    }

    /// Heads evaluated at the same time.
    fn concurrent_heads(&self) -> usize {
        rayon::current_num_threads().min(self.b * self.h).max(1)
    }
}

/// A benchmark point ready to run: its record (minus timing) and the
/// workload itself.
struct Prepared {
    record: BenchRecord,
    run: Box<dyn FnMut()>,
}

fn prepare_wkv(cfg: &ScalingConfig, t: usize) -> Result<Prepared> {
    let dims = cfg.dims(t);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs: KernelInputs<f32> = random_inputs(&mut rng, dims, false).cast();
    let chunk = cfg.chunk;
    let state_bytes = wkv_chunked(&inputs, None, chunk)?.state.bytes();

    let (btn, c) = (dims.b * t * dims.h * dims.n, chunk.min(t));
    let streams = 6 * btn;
    let output = btn + dims.b * dims.h * dims.n * dims.nv;
    let per_head = 7 * t * dims.n
        + t * dims.nv
        + dims.n * dims.nv
        + 4 * c * c
        + c * dims.nv
        + 2 * c * dims.n
        + (c + 2) * dims.n;
    Ok(Prepared {
        record: BenchRecord {
            mode: "wkv_chunked".into(),
            t,
            wall_ms: 0.0,
            state_bytes,
            peak_alloc_proxy: streams + output + cfg.concurrent_heads() * per_head,
            threads: rayon::current_num_threads(),
            dtype: DType::F32,
        },
        run: Box::new(move || {
            std::hint::black_box(wkv_chunked(&inputs, None, chunk).expect("validated inputs"));
        }),
    })
}

/// Times `wkv_chunked` in f32 at sequence length `t`.
pub fn bench_wkv(cfg: &ScalingConfig, t: usize) -> Result<BenchRecord> {
    Ok(time_interleaved(vec![prepare_wkv(cfg, t)?], cfg.runs).remove(0))
}

/// Warms every point up once, then times `runs` rounds, each visiting every
/// point once, so slow stretches of machine time spread over all points.
fn time_interleaved(mut points: Vec<Prepared>, runs: usize) -> Vec<BenchRecord> {
    for p in &mut points {
        (p.run)();
    }
    let mut times = vec![Vec::with_capacity(runs); points.len()];
    for _ in 0..runs.max(1) {
        for (p, ts) in points.iter_mut().zip(&mut times) {
            ts.push(time_ms(&mut p.run));
        }
    }
    points
        .into_iter()
        .zip(&mut times)
        .map(|(p, ts)| BenchRecord {
            wall_ms: median(ts),
            ..p.record
        })
        .collect()
}

/// Causal cross-attention: query `t` (text padded to the image length)
/// attends to image keys `0..=t`. All streams are `[B, T, H, N]`; the full
/// `T × T` score matrix of each head is materialised.
pub fn softmax_cross_attention(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let [b, t, h, n] = q.shape()[..] else {
        return Err(Error::shape("softmax_cross_attention", q.shape(), &[]));
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape(
            "softmax_cross_attention",
            q.shape(),
            k.shape(),
        ));
    }
    let dims = Dims { b, t, h, n, nv: n };
    let scale = 1.0 / (n as f32).sqrt();
    let gather = |x: &Tensor<f32>, bi: usize, hi: usize| -> Vec<f32> {
        (0..t)
            .flat_map(|ti| {
                let off = ((bi * t + ti) * h + hi) * n;
                x.data()[off..off + n].iter().copied()
            })
            .collect()
    };
    let heads = map_heads(&dims, |bi, hi| {
        let (qh, kh, vh) = (gather(q, bi, hi), gather(k, bi, hi), gather(v, bi, hi));
        let mut scores = vec![f32::NEG_INFINITY; t * t];
        for i in 0..t {
            let qi = &qh[i * n..(i + 1) * n];
            for j in 0..=i {
                let kj = &kh[j * n..(j + 1) * n];
                scores[i * t + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        let mut out = vec![0.0f32; t * n];
        for i in 0..t {
            let row = &mut scores[i * t..(i + 1) * t];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0;
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            let oi = &mut out[i * n..(i + 1) * n];
            for (j, &p) in row.iter().enumerate().take(i + 1) {
                let w = p / z;
                for (o, &vj) in oi.iter_mut().zip(&vh[j * n..(j + 1) * n]) {
                    *o += w * vj;
                }
            }
        }
        out
    });
    let mut data = vec![0.0f32; b * t * h * n];
    for (idx, out) in heads.into_iter().enumerate() {
        let (bi, hi) = (idx / h, idx % h);
        for ti in 0..t {
            let off = ((bi * t + ti) * h + hi) * n;
            data[off..off + n].copy_from_slice(&out[ti * n..(ti + 1) * n]);
        }
    }
    Tensor::new([b, t, h, n], data)
}

fn prepare_softmax(cfg: &ScalingConfig, t: usize) -> Result<Prepared> {
    let shape = [cfg.b, t, cfg.h, cfg.n];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = || Tensor::<f64>::randn(shape, &mut rng).cast::<f32>();
    let (q, k, v) = (draw(), draw(), draw());
    softmax_cross_attention(&q, &k, &v)?;

    let btn = cfg.b * t * cfg.h * cfg.n;
    let per_head = t * t + 4 * t * cfg.n;
    Ok(Prepared {
        record: BenchRecord {
            mode: "softmax_xattn".into(),
            t,
            wall_ms: 0.0,
            state_bytes: 2 * btn * DType::F32.size(),
            peak_alloc_proxy: 4 * btn + cfg.concurrent_heads() * per_head,
            threads: rayon::current_num_threads(),
            dtype: DType::F32,
        },
        run: Box::new(move || {
            std::hint::black_box(softmax_cross_attention(&q, &k, &v).expect("validated inputs"));
        }),
    })
}

/// Times [`softmax_cross_attention`] in f32 at sequence length `t`. Its
/// "state" is the key/value cache, which grows with `t`.
pub fn bench_softmax(cfg: &ScalingConfig, t: usize) -> Result<BenchRecord> {
    Ok(time_interleaved(vec![prepare_softmax(cfg, t)?], cfg.runs).remove(0))
}

/// WKV records for every `t`, then baseline records if requested. Points of
/// one mode are timed in interleaved rounds.
pub fn bench_scaling(
    cfg: &ScalingConfig,
    t_list: &[usize],
    baseline: Baseline,
) -> Result<Vec<BenchRecord>> {
    if t_list.is_empty() || t_list.windows(2).any(|w| w[0] >= w[1]) || t_list[0] == 0 {
        return Err(Error::Config(format!(
            "T list must be positive and ascending, got {t_list:?}"
        )));
    }
    let wkv = t_list
        .iter()
        .map(|&t| prepare_wkv(cfg, t))
        .collect::<Result<_>>()?;
    let mut out = time_interleaved(wkv, cfg.runs);
    if baseline == Baseline::Softmax {
        let soft = t_list
            .iter()
            .map(|&t| prepare_softmax(cfg, t))
            .collect::<Result<_>>()?;
        out.extend(time_interleaved(soft, cfg.runs));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// summaries

/// `(T, wall_ms(2T) / wall_ms(T))` for every record of `mode` whose doubled
/// length was also measured.
pub fn doubling_ratios(records: &[BenchRecord], mode: &str) -> Vec<(usize, f64)> {
    let rows: Vec<_> = records.iter().filter(|r| r.mode == mode).collect();
    rows.iter()
        .filter_map(|r| {
            rows.iter()
                .find(|s| s.t == 2 * r.t)
                .map(|s| (r.t, s.wall_ms / r.wall_ms))
        })
        .collect()
}

/// Least-squares polynomial `y ≈ Σ coeffs[i]·xⁱ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    pub coeffs: Vec<f64>,
    pub r2: f64,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

pub fn fit_poly(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    let m = degree + 1;
    if xs.len() != ys.len() || xs.len() < m {
        return Err(Error::Config(format!(
            "degree-{degree} fit needs at least {m} points, got {}",
            xs.len().min(ys.len())
        )));
    }
    // fit in x / x_max for conditioning, then rescale
    let x_max = xs
        .iter()
        .fold(0.0f64, |a, &x| a.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let mut a = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let pows: Vec<f64> = (0..m).map(|i| (x / x_max).powi(i as i32)).collect();
        for i in 0..m {
            rhs[i] += pows[i] * y;
            for j in 0..m {
                a[i * m + j] += pows[i] * pows[j];
            }
        }
    }
    let scaled = solve(&mut a, &mut rhs, m)
        .ok_or_else(|| Error::Config("degenerate fit: x values not distinct enough".into()))?;
    let coeffs = scaled
        .iter()
        .enumerate()
        .map(|(i, c)| c / x_max.powi(i as i32))
        .collect();
    let mut fit = PolyFit { coeffs, r2: 0.0 };
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, y)| (y - fit.eval(x)).powi(2))
        .sum();
    fit.r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    Ok(fit)
}

/// Gaussian elimination with partial pivoting.
fn solve(a: &mut [f64], b: &mut [f64], m: usize) -> Option<Vec<f64>> {
    for col in 0..m {
        let piv =
            (col..m).max_by(|&i, &j| a[i * m + col].abs().total_cmp(&a[j * m + col].abs()))?;
        if a[piv * m + col].abs() < 1e-12 {
            return None;
        }
        for j in 0..m {
            a.swap(col * m + j, piv * m + j);
        }
        b.swap(col, piv);
        for row in col + 1..m {
            let f = a[row * m + col] / a[col * m + col];
            for j in col..m {
                a[row * m + j] -= f * a[col * m + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let s: f64 = (row + 1..m).map(|j| a[row * m + j] * x[j]).sum();
        x[row] = (b[row] - s) / a[row * m + row];
    }
    Some(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSummary {
    pub mode: String,
    pub ratios: Vec<(usize, f64)>,
    pub linear: PolyFit,
    pub quadratic: Option<PolyFit>,
    /// Slope of `log wall_ms` against `log T`.
    pub exponent: f64,
}

pub fn summarize(records: &[BenchRecord], mode: &str) -> Result<ScalingSummary> {
    let rows: Vec<_> = records.iter().filter(|r| r.mode == mode).collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.t as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.wall_ms).collect();
    let linear = fit_poly(&xs, &ys, 1)?;
    let quadratic = fit_poly(&xs, &ys, 2).ok();
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let exponent = fit_poly(&lx, &ly, 1)?.coeffs[1];
    Ok(ScalingSummary {
        mode: mode.to_string(),
        ratios: doubling_ratios(records, mode),
        linear,
        quadratic,
        exponent,
    })
}
