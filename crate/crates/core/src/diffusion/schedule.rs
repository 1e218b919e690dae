use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-process variances and their cumulative signal fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(
                "betas must be non-empty and inside (0, 1)".into(),
            ));
        }
        let alphas_cumprod = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    /// Betas spaced evenly from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(
                "a linear schedule needs at least 2 steps".into(),
            ));
        }
        let betas = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    /// The 1000-step DDPM endpoints (1e-4, 0.02) rescaled to `steps`, which
    /// keeps the total amount of noise and ends near pure noise.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps as f64;
        Self::linear(steps, 1e-4 * scale, 0.02 * scale)
    }

    /// 200 steps.
    pub fn toy() -> Self {
        Self::scaled_linear(200).expect("valid toy schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::Config(format!("timestep {t} outside [0, {})", self.steps())))
    }

    /// `stride`-spaced timesteps ending at the last one, noisiest first.
    pub fn strided(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 || count > self.steps() {
            return Err(Error::Config(format!(
                "cannot take {count} sampling steps from a {}-step schedule",
                self.steps()
            )));
        }
        let stride = self.steps() / count;
        Ok((0..count).map(|i| self.steps() - 1 - i * stride).collect())
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·noise`, with one timestep per batch row
/// (`x0` is `[B, ...]`).
pub fn q_sample(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: &[usize],
    noise: &Tensor,
) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::shape("q_sample", x0.shape(), noise.shape()));
    }
    if t.len() != x0.shape()[0] {
        return Err(Error::shape("q_sample (t)", x0.shape(), &[t.len()]));
    }
    let per_row = x0.numel() / t.len();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(ti)?;
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        let rows = i * per_row..(i + 1) * per_row;
        out.extend(
            x0.data()[rows.clone()]
                .iter()
                .zip(&noise.data()[rows])
                .map(|(x, e)| s * x + n * e),
        );
    }
    Tensor::new(x0.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn toy_schedule_is_monotone_and_ends_near_noise() {
        let s = NoiseSchedule::toy();
        assert_eq!(s.steps(), 200);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alphas_cumprod.windows(2).all(|w| w[0] > w[1]));
        assert!(s.alphas_cumprod.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(*s.alphas_cumprod.last().unwrap() < 0.02);
    }

    #[test]
    fn literal_endpoints_leave_signal() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        assert!(*s.alphas_cumprod.last().unwrap() > 0.1);
    }

    #[test]
    fn cumprod_matches_product() {
        let s = NoiseSchedule::linear(10, 0.1, 0.3).unwrap();
        for t in 0..10 {
            let p: f64 = s.betas[..=t].iter().map(|b| 1.0 - b).product();
            assert!((s.alphas_cumprod[t] - p).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_quarter_alpha() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::randn([1, 6], &mut rng);
        let e = Tensor::randn([1, 6], &mut rng);
        let xt = q_sample(&s, &x0, &[0], &e).unwrap();
        for ((&x, &n), &y) in x0.data().iter().zip(e.data()).zip(xt.data()) {
            assert!((y - (0.5 * x + 0.75f64.sqrt() * n)).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_low_noise_limit_and_range_error() {
        let s = NoiseSchedule::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn([2, 4], &mut rng);
        let e = Tensor::randn([2, 4], &mut rng);
        let xt = q_sample(&s, &x0, &[0, 0], &e).unwrap();
        assert!(xt.max_abs_diff(&x0).unwrap() < 0.1);
        assert!(q_sample(&s, &x0, &[0, 200], &e).is_err());
    }

    #[test]
    fn noise_variance_monte_carlo() {
        let s = NoiseSchedule::toy();
        let t = 80;
        let draws = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::zeros([draws, 1]);
        let e = Tensor::randn([draws, 1], &mut rng);
        let xt = q_sample(&s, &x0, &vec![t; draws], &e).unwrap();
        let var = xt.data().iter().map(|x| x * x).sum::<f64>() / draws as f64;
        let expect = 1.0 - s.alphas_cumprod[t];
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn strided_steps() {
        let s = NoiseSchedule::toy();
        let steps = s.strided(50).unwrap();
        assert_eq!(steps.len(), 50);
        assert_eq!(steps[0], 199);
        assert_eq!(*steps.last().unwrap(), 3);
        assert!(steps.windows(2).all(|w| w[0] - w[1] == 4));
        assert!(s.strided(0).is_err());
    }
}
