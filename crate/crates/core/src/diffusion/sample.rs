use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{class_centroids, class_cond, nearest_centroid, CLASSES};
use super::model::Denoiser;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampling steps taken from the training schedule.
pub const SAMPLE_STEPS: usize = 50;

/// Ancestral DDPM sampling over `steps` evenly strided timesteps, one image
/// per row of `cond`. Each step predicts `x0`, clips it to `[-1, 1]` and
/// draws from the forward-process posterior between consecutive kept
/// timesteps. Returns `[n, seq_len, C]` in `[-1, 1]`.
pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let n = cond.shape()[0];
    let shape = [n, model.cfg.seq_len, model.cfg.channels];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(shape, &mut rng);
    let taus = schedule.strided(steps)?;
    for (i, &t) in taus.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match taus.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let beta = 1.0 - ab / ab_prev;
        let eps = model.predict(&x, cond, &vec![t; n])?;
        let noise = Tensor::<f64>::randn(shape, &mut rng);
        let coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let coef_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let data = x
            .data()
            .iter()
            .zip(eps.data())
            .zip(noise.data())
            .map(|((&xt, &e), &z)| {
                let x0 = ((xt - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
                coef_x0 * x0 + coef_xt * xt + sigma * z
            })
            .collect();
        x = Tensor::new(shape.to_vec(), data)?;
        if !x.is_finite() {
            return Err(Error::NonFinite { stage: "sampling" });
        }
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone)]
pub struct SampleReport {
    pub images: Tensor,
    /// Conditioning class per image; `None` for unconditional draws.
    pub labels: Vec<Option<usize>>,
    pub predicted: Vec<usize>,
}

impl SampleReport {
    /// Fraction of conditioned images assigned to their own class.
    pub fn accuracy(&self) -> f64 {
        let (hits, total) = self
            .labels
            .iter()
            .zip(&self.predicted)
            .filter_map(|(l, p)| l.map(|l| l == *p))
            .fold((0, 0), |(h, n), hit| (h + hit as usize, n + 1));
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut counts = [0; CLASSES];
        for &p in &self.predicted {
            counts[p] += 1;
        }
        counts
    }
}

/// Samples `n` images (classes cycling 0..4, or unconditional) and labels
/// them with a nearest-centroid classifier fit on fresh training glyphs.
pub fn sample_and_classify(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    n: usize,
    conditional: bool,
    seed: u64,
) -> Result<SampleReport> {
    let labels: Vec<Option<usize>> = (0..n).map(|i| conditional.then_some(i % CLASSES)).collect();
    let cond = class_cond(&labels, model.cfg.cond_len, model.cfg.layer.d_q)?;
    let images = sample(model, schedule, &cond, SAMPLE_STEPS, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc3a7);
    let centroids = class_centroids(100, model.cfg.channels, &mut rng)?;
    let predicted = nearest_centroid(&centroids, &images);
    Ok(SampleReport {
        images,
        labels,
        predicted,
    })
}

/// Binary PPM (P6) grid of grayscale images in `[-1, 1]`, `cols` per row,
/// each pixel drawn as a `scale`×`scale` block with a 1-block gutter.
pub fn ppm_grid(images: &Tensor, side: usize, cols: usize, scale: usize) -> Result<Vec<u8>> {
    let n = images.shape()[0];
    let per = images.numel() / n;
    let channels = per / (side * side);
    if channels == 0 || channels * side * side != per || cols == 0 || scale == 0 {
        return Err(Error::shape("ppm_grid", images.shape(), &[n, side * side]));
    }
    let rows = n.div_ceil(cols);
    let cell = (side + 1) * scale;
    let (w, h) = (cols * cell + scale, rows * cell + scale);
    let mut pixels = vec![40u8; w * h * 3];
    for (idx, img) in images.data().chunks(per).enumerate() {
        let (gy, gx) = (idx / cols, idx % cols);
        for r in 0..side {
            for c in 0..side {
                let v = img[(r * side + c) * channels];
                let byte = (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
                for dy in 0..scale {
                    for dx in 0..scale {
                        let y = scale + gy * cell + r * scale + dy;
                        let x = scale + gx * cell + c * scale + dx;
                        let o = (y * w + x) * 3;
                        pixels[o..o + 3].fill(byte);
                    }
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;

    #[test]
    fn untrained_samples_have_contract_shape_and_range() {
        let model = Denoiser::init(DenoiserConfig::toy(), 0).unwrap();
        let schedule = NoiseSchedule::toy();
        let cond = class_cond(&[Some(1), None, Some(3)], 64, 8).unwrap();
        let x = sample(&model, &schedule, &cond, 10, 5).unwrap();
        assert_eq!(x.shape(), [3, 64, 1]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(x, sample(&model, &schedule, &cond, 10, 5).unwrap());
    }

    #[test]
    fn report_accuracy_counts_only_conditioned() {
        let r = SampleReport {
            images: Tensor::zeros([3, 1]),
            labels: vec![Some(0), Some(1), None],
            predicted: vec![0, 2, 1],
        };
        assert_eq!(r.accuracy(), 0.5);
        assert_eq!(r.class_counts(), [1, 1, 1, 0]);
    }

    #[test]
    fn ppm_header_and_size() {
        let imgs = Tensor::from_fn([3, 64, 1], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        let bytes = ppm_grid(&imgs, 8, 2, 2).unwrap();
        let header = b"P6\n38 38\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 38 * 38 * 3);
    }
}
