use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use crosswkv::bench::{
    bench_scaling, equivalence, equivalence_tolerance, flops_estimate, summarize, write_csv,
    Baseline, EquivalenceConfig, ScalingConfig, CSV_HEADER,
};
use crosswkv::crosswkv::{layer_gradcheck, LayerConfig};
use crosswkv::diffusion::{
    ppm_grid, sample_and_classify, train_model, write_log_csv, Denoiser, DenoiserConfig, EvalSet,
    NoiseSchedule, TrainConfig, CLASS_NAMES,
};
use crosswkv::wkv::{
    compose_transpositions, random_transpositions, s_n_tracking_demo, transposition_words,
};
use crosswkv::{DType, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exit code for a run that completed but missed its tolerance.
const BREACH: u8 = 1;
/// Exit code for invalid input or I/O failure.
const FAILURE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "cwkv",
    version,
    about = "CrossWKV kernels: equivalence, benchmarks, demos and a toy diffusion model"
)]
struct Cli {
    /// Worker threads for the (batch, head)-parallel kernels.
    #[arg(long, global = true, default_value_t = 1, env = "CWKV_THREADS")]
    threads: usize,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, env = "CWKV_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Compare recurrent, oracle and chunked kernels on identical random inputs.
    Equivalence {
        #[arg(long = "B", default_value_t = 2)]
        b: usize,
        #[arg(long = "T", default_value_t = 37)]
        t: usize,
        #[arg(long = "H", default_value_t = 2)]
        h: usize,
        #[arg(long = "N", default_value_t = 8)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,16")]
        chunks: Vec<usize>,
        #[arg(long, default_value = "f64")]
        dtype: DType,
        /// Override the dtype's default tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Time the chunked kernel (and optionally a softmax baseline) across sequence lengths.
    BenchScaling {
        #[arg(
            long = "T-list",
            value_delimiter = ',',
            default_value = "256,512,1024,2048"
        )]
        t_list: Vec<usize>,
        #[arg(long, default_value = "softmax")]
        baseline: Baseline,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long = "B", default_value_t = 1)]
        b: usize,
        #[arg(long = "H", default_value_t = 4)]
        h: usize,
        #[arg(long = "N", default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        chunk: usize,
        /// Timed runs per point (after one warm-up).
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Track a random word of transpositions in S_n with the WKV state.
    DemoS5 {
        #[arg(long, default_value_t = 5)]
        n: usize,
        /// Head dimension; defaults to n.
        #[arg(long = "N")]
        head_dim: Option<usize>,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Check every word of up to n transpositions instead of a random one.
        #[arg(long)]
        exhaustive: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Finite-difference check of every trainable parameter of one layer.
    Gradcheck {
        #[arg(long = "D", default_value_t = 8)]
        d: usize,
        #[arg(long = "Dq", default_value_t = 4)]
        d_q: usize,
        #[arg(long = "Dv", default_value_t = 8)]
        d_v: usize,
        #[arg(long = "H", default_value_t = 2)]
        h: usize,
        #[arg(long = "B", default_value_t = 1)]
        b: usize,
        #[arg(long = "T", default_value_t = 5)]
        t: usize,
        #[arg(long = "L", default_value_t = 3)]
        l: usize,
        /// Check a first layer (no v_first input).
        #[arg(long)]
        first_layer: bool,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Train the toy glyph denoiser; writes a checkpoint and a CSV loss log.
    TrainToy {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
        #[arg(long, default_value = "toy.cwkv")]
        out: PathBuf,
        #[arg(long, default_value = "toy_log.csv")]
        log: PathBuf,
        /// Held-out batch size for the final loss report (0 skips it).
        #[arg(long, default_value_t = 256)]
        eval_size: usize,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Sample glyphs from a checkpoint, classify them and write a PPM grid.
    SampleToy {
        #[arg(long, default_value = "toy.cwkv")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value = "samples.ppm")]
        out: PathBuf,
        #[arg(long)]
        unconditional: bool,
        /// Exit with failure when conditional accuracy is below this.
        #[arg(long, default_value_t = 0.8)]
        min_accuracy: f64,
        #[command(flatten)]
        seed: SeedArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(FAILURE);
    }
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(BREACH),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(FAILURE)
        }
    }
}

/// `Ok(false)` means a tolerance was missed.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Equivalence {
            b,
            t,
            h,
            n,
            chunks,
            dtype,
            tol,
            seed,
        } => {
            let cfg = EquivalenceConfig {
                b,
                t,
                h,
                n,
                chunks,
                seed: seed.seed,
                ..Default::default()
            };
            let tol = tol.unwrap_or(equivalence_tolerance(dtype));
            let report = equivalence(&cfg, dtype)?;
            println!("B={b} T={t} H={h} N={n} dtype={dtype} seed={}", seed.seed);
            for (pair, err) in &report.pairs {
                println!("  {pair:<22} max rel err {err:.3e}");
            }
            match report.breach(tol) {
                Some((pair, err)) => {
                    println!("FAIL: {pair} error {err:.3e} exceeds {tol:.0e}");
                    Ok(false)
                }
                None => {
                    println!("ok: all pairs within {tol:.0e}");
                    Ok(true)
                }
            }
        }
        Command::BenchScaling {
            t_list,
            baseline,
            csv,
            b,
            h,
            n,
            chunk,
            runs,
            seed,
        } => {
            let cfg = ScalingConfig {
                b,
                h,
                n,
                chunk,
                runs: runs.max(5),
                seed: seed.seed,
            };
            let records = bench_scaling(&cfg, &t_list, baseline)?;
            println!("{CSV_HEADER}");
            for r in &records {
                println!("{}", r.csv_row());
            }
            if let Some(path) = &csv {
                write_csv(path, &records)?;
            }
            let mut modes: Vec<&str> = records.iter().map(|r| r.mode.as_str()).collect();
            modes.dedup();
            for mode in modes {
                let s = summarize(&records, mode)?;
                println!("\n{mode}:");
                for (t, ratio) in &s.ratios {
                    println!("  wall({})/wall({t}) = {ratio:.2}", 2 * t);
                }
                println!(
                    "  linear fit     ms = {:.4e} + {:.4e}·T  (R² {:.4})",
                    s.linear.coeffs[0], s.linear.coeffs[1], s.linear.r2
                );
                if let Some(q) = &s.quadratic {
                    println!(
                        "  quadratic fit  ms = {:.4e} + {:.4e}·T + {:.4e}·T²  (R² {:.4})",
                        q.coeffs[0], q.coeffs[1], q.coeffs[2], q.r2
                    );
                }
                println!("  log-log slope  {:.2}", s.exponent);
            }
            println!("\nanalytic FLOPs 13·T·H·N (H={h}, N={n}):");
            for &t in &t_list {
                println!("  T={t:<6} {}", flops_estimate(t, h, n));
            }
            Ok(true)
        }
        Command::DemoS5 {
            n,
            head_dim,
            steps,
            exhaustive,
            seed,
        } => {
            let big_n = head_dim.unwrap_or(n);
            if exhaustive {
                let words = transposition_words(n, n);
                let mut reached = std::collections::HashSet::new();
                for w in &words {
                    let r = s_n_tracking_demo(n, big_n, w)?;
                    let brute = compose_transpositions(n, w);
                    if r.permutation != brute || r.max_deviation > 1e-6 {
                        println!(
                            "FAIL: word {w:?} tracked {} expected {brute}",
                            r.permutation
                        );
                        return Ok(false);
                    }
                    reached.insert(brute);
                }
                let order: usize = (1..=n).product();
                println!(
                    "{} words of up to {n} transpositions, {} of {order} permutations reached",
                    words.len(),
                    reached.len()
                );
                return Ok(reached.len() == order);
            }
            if n < 2 && steps > 0 {
                return Err(crosswkv::Error::Config("transpositions need n >= 2".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.seed);
            let swaps = random_transpositions(n, steps, &mut rng);
            let r = s_n_tracking_demo(n, big_n, &swaps)?;
            let brute = compose_transpositions(n, &swaps);
            println!("n={n} N={big_n} steps={steps} seed={}", seed.seed);
            println!("  tracked      {}", r.permutation);
            println!("  brute force  {brute}");
            println!(
                "  max deviation from permutation matrix {:.3e}",
                r.max_deviation
            );
            Ok(r.permutation == brute && r.max_deviation <= 1e-6)
        }
        Command::Gradcheck {
            d,
            d_q,
            d_v,
            h,
            b,
            t,
            l,
            first_layer,
            step,
            tol,
            seed,
        } => {
            let cfg = LayerConfig::new(d, d_q, d_v, h)?.with_first_layer(first_layer);
            let report = layer_gradcheck(&cfg, (b, t, l), seed.seed, step)?;
            for (name, err) in &report.per_param {
                println!("  {name:<12} {err:.3e}");
            }
            let (worst, err) = report.worst();
            println!(
                "{} parameters, max rel err {err:.3e} ({worst})",
                report.per_param.len()
            );
            Ok(err <= tol)
        }
        Command::TrainToy {
            steps,
            batch,
            lr,
            log_every,
            out,
            log,
            eval_size,
            seed,
        } => {
            let mut cfg = TrainConfig {
                steps,
                batch_size: batch,
                log_every,
                seed: seed.seed,
                ..Default::default()
            };
            cfg.optim.lr = lr;
            let schedule = NoiseSchedule::toy();
            let mut model = Denoiser::init(DenoiserConfig::toy(), seed.seed)?;
            let records = train_model(&mut model, &schedule, &cfg, |r| {
                println!(
                    "step {:>5}  loss {:.5}  {:>9.1} ms",
                    r.step, r.loss, r.wallclock_ms
                );
            })?;
            model.save(&out)?;
            write_log_csv(&log, &records)?;
            println!("wrote {} and {}", out.display(), log.display());
            if eval_size > 0 {
                let eval = EvalSet::new(&model.cfg, &schedule, eval_size, seed.seed ^ 0xe7a1)?;
                let loss = eval.loss(&model, &schedule)?;
                let base = eval.zero_baseline();
                println!(
                    "eval loss {loss:.5}, zero-predictor {base:.5}, ratio {:.3}",
                    loss / base
                );
            }
            Ok(true)
        }
        Command::SampleToy {
            checkpoint,
            n,
            out,
            unconditional,
            min_accuracy,
            seed,
        } => {
            let model = Denoiser::load(&checkpoint)?;
            let schedule = NoiseSchedule::toy();
            let start = Instant::now();
            let report = sample_and_classify(&model, &schedule, n, !unconditional, seed.seed)?;
            let cols = 20.min(n.max(1));
            std::fs::write(&out, ppm_grid(&report.images, 8, cols, 4)?).map_err(|e| {
                crosswkv::Error::Io {
                    path: out.clone(),
                    source: e,
                }
            })?;
            println!(
                "{n} samples in {:.1} s, grid written to {}",
                start.elapsed().as_secs_f64(),
                out.display()
            );
            let counts = report.class_counts();
            for (name, c) in CLASS_NAMES.iter().zip(counts) {
                println!("  {name:<8} {c}");
            }
            if unconditional {
                let top = counts.iter().max().copied().unwrap_or(0);
                println!("largest class share {:.3}", top as f64 / n.max(1) as f64);
                return Ok(true);
            }
            let acc = report.accuracy();
            println!("conditional accuracy {acc:.3}");
            Ok(acc >= min_accuracy)
        }
    }
}
