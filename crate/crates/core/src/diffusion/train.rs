use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{class_cond, glyphs, ToyBatch, CLASSES};
use super::model::{Denoiser, DenoiserConfig};
use super::schedule::{q_sample, NoiseSchedule};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

/// Anything mapping `(x_t, cond, t)` to predicted noise of `x_t`'s shape.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.predict(x_t, cond, t)
    }
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, &Tensor, &[usize]) -> Result<Tensor>,
{
    fn predict_noise(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        self(x_t, cond, t)
    }
}

/// Mean squared error between `noise` and the prediction from the noised
/// batch at timesteps `t`.
pub fn diffusion_loss_with(
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    batch: &ToyBatch,
    t: &[usize],
    noise: &Tensor,
) -> Result<f64> {
    let x_t = q_sample(schedule, &batch.x0, t, noise)?;
    let pred = model.predict_noise(&x_t, &batch.cond, t)?;
    if pred.shape() != noise.shape() {
        return Err(Error::shape("diffusion_loss", noise.shape(), pred.shape()));
    }
    let se: f64 = pred
        .data()
        .iter()
        .zip(noise.data())
        .map(|(p, e)| (p - e).powi(2))
        .sum();
    Ok(se / noise.numel() as f64)
}

/// [`diffusion_loss_with`] on uniformly drawn timesteps and unit Gaussian noise.
pub fn diffusion_loss<R: Rng + ?Sized>(
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    batch: &ToyBatch,
    rng: &mut R,
) -> Result<f64> {
    let (t, noise) = draw_noise(schedule, batch, rng);
    diffusion_loss_with(model, schedule, batch, &t, &noise)
}

fn draw_noise<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    batch: &ToyBatch,
    rng: &mut R,
) -> (Vec<usize>, Tensor) {
    let t = (0..batch.labels.len())
        .map(|_| rng.random_range(0..schedule.steps()))
        .collect();
    let noise = Tensor::randn(batch.x0.shape().to_vec(), rng);
    (t, noise)
}

/// Random labels, glyphs and class tokens; each row's tokens are zeroed with
/// probability `cond_dropout`.
pub fn sample_batch<R: Rng + ?Sized>(
    cfg: &DenoiserConfig,
    batch_size: usize,
    cond_dropout: f64,
    rng: &mut R,
) -> Result<ToyBatch> {
    let labels: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(0..CLASSES))
        .collect();
    let x0 = glyphs(&labels, cfg.channels, rng)?;
    let tokens: Vec<Option<usize>> = labels
        .iter()
        .map(|&l| (!rng.random_bool(cond_dropout)).then_some(l))
        .collect();
    let cond = class_cond(&tokens, cfg.cond_len, cfg.layer.d_q)?;
    Ok(ToyBatch { x0, cond, labels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
    pub log_every: usize,
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            optim: AdamWConfig::default(),
            seed: 0,
            log_every: 50,
            cond_dropout: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub wallclock_ms: f64,
}

/// Optimizes `model` in place. Each logged record holds the loss of the batch
/// drawn at that step, before its update; `on_log` sees records as they are
/// produced.
pub fn train_model(
    model: &mut Denoiser,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    if cfg.log_every == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "log_every and batch_size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optim);
    let start = Instant::now();
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch = sample_batch(&model.cfg, cfg.batch_size, cfg.cond_dropout, &mut rng)?;
        let (t, noise) = draw_noise(schedule, &batch, &mut rng);
        let x_t = q_sample(schedule, &batch.x0, &t, &noise)?;

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let x = tape.constant(x_t);
        let cond = tape.constant(batch.cond);
        let pred = model.forward_on_tape(&mut tape, &vars, x, cond, &t, true)?;
        let target = tape.constant(noise);
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        let loss_var = tape.mean(sq);
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grads = tape.backward(loss_var)?;

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let rec = LogRecord {
                step,
                loss,
                wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            on_log(&rec);
            log.push(rec);
        }

        let var_fields = vars.fields();
        let mut grad_list = Vec::with_capacity(var_fields.len());
        let mut keep = Vec::with_capacity(var_fields.len());
        for (_, v) in &var_fields {
            let g = grads.get(**v);
            keep.push(g.is_some());
            grad_list.extend(g);
        }
        let mut params: Vec<&mut Tensor> = model
            .params
            .fields_mut()
            .into_iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|((_, p), _)| p)
            .collect();
        opt.step(&mut params, &grad_list)?;
    }
    Ok(log)
}

/// Fresh model from `seed`, trained for `cfg.steps` steps.
pub fn train(
    model_cfg: DenoiserConfig,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Denoiser, Vec<LogRecord>)> {
    let mut model = Denoiser::init(model_cfg, cfg.seed)?;
    let log = train_model(&mut model, schedule, cfg, |_| {})?;
    Ok((model, log))
}

pub fn write_log_csv(path: &Path, log: &[LogRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "step,loss,wallclock_ms").map_err(io)?;
    for r in log {
        writeln!(f, "{},{},{:.3}", r.step, r.loss, r.wallclock_ms).map_err(io)?;
    }
    f.flush().map_err(io)
}

/// A fixed labelled batch with fixed timesteps and noise, for comparing
/// losses across models.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub batch: ToyBatch,
    pub t: Vec<usize>,
    pub noise: Tensor,
}

impl EvalSet {
    pub fn new(
        cfg: &DenoiserConfig,
        schedule: &NoiseSchedule,
        size: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = sample_batch(cfg, size, 0.0, &mut rng)?;
        let (t, noise) = draw_noise(schedule, &batch, &mut rng);
        Ok(Self { batch, t, noise })
    }

    pub fn loss(&self, model: &impl NoisePredictor, schedule: &NoiseSchedule) -> Result<f64> {
        diffusion_loss_with(model, schedule, &self.batch, &self.t, &self.noise)
    }

    /// Loss of the predictor that always outputs zero.
    pub fn zero_baseline(&self) -> f64 {
        self.noise.data().iter().map(|e| e * e).sum::<f64>() / self.noise.numel() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            layer: crate::crosswkv::LayerConfig::new(8, 8, 8, 2).unwrap(),
            depth: 2,
            channels: 1,
            seq_len: 64,
            cond_len: 64,
        }
    }

    #[test]
    fn zero_and_cheating_predictors() {
        let schedule = NoiseSchedule::toy();
        let cfg = DenoiserConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_batch(&cfg, 64, 0.0, &mut rng).unwrap();
        let zero = |x: &Tensor, _: &Tensor, _: &[usize]| Ok(Tensor::zeros(x.shape().to_vec()));
        let loss = diffusion_loss(&zero, &schedule, &batch, &mut rng).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "{loss}");

        let (t, noise) = draw_noise(&schedule, &batch, &mut rng);
        let x0 = batch.x0.clone();
        let cheat = |x: &Tensor, _: &Tensor, t: &[usize]| {
            let per = x.numel() / t.len();
            let data = x
                .data()
                .iter()
                .zip(x0.data())
                .enumerate()
                .map(|(i, (xt, x0))| {
                    let ab = schedule.alpha_bar(t[i / per]).unwrap();
                    (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt()
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        };
        let loss = diffusion_loss_with(&cheat, &schedule, &batch, &t, &noise).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn training_is_deterministic_and_logs_on_schedule() {
        let schedule = NoiseSchedule::toy();
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            log_every: 4,
            seed: 3,
            ..Default::default()
        };
        let (m1, log1) = train(tiny_cfg(), &schedule, &cfg).unwrap();
        let (m2, log2) = train(tiny_cfg(), &schedule, &cfg).unwrap();
        assert_eq!(m1, m2);
        let steps: Vec<_> = log1.iter().map(|r| r.step).collect();
        assert_eq!(steps, [0, 4, 5]);
        let l1: Vec<u64> = log1.iter().map(|r| r.loss.to_bits()).collect();
        let l2: Vec<u64> = log2.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(l1, l2);
        assert_ne!(m1, Denoiser::init(tiny_cfg(), 3).unwrap());
    }

    #[test]
    fn zero_steps_leave_init() {
        let cfg = TrainConfig {
            steps: 0,
            seed: 8,
            ..Default::default()
        };
        let (m, log) = train(tiny_cfg(), &NoiseSchedule::toy(), &cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, Denoiser::init(tiny_cfg(), 8).unwrap());
    }

    #[test]
    fn log_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = [LogRecord {
            step: 0,
            loss: 0.5,
            wallclock_ms: 1.25,
        }];
        write_log_csv(&path, &log).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "step,loss,wallclock_ms\n0,0.5,1.250\n"
        );
    }
}
