use rand::Rng;

use super::{Scalar, Tensor};

/// Xavier gain used for every projection and low-rank factor: 2^(-2.5).
pub const XAVIER_GAIN: f64 = 0.176_776_695_296_636_9;

/// Half-width of the Xavier uniform support for a `fan_in × fan_out` matrix.
pub fn xavier_bound(fan_in: usize, fan_out: usize, gain: f64) -> f64 {
    gain * (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `[fan_in, fan_out]` matrix with i.i.d. entries uniform on `[-b, b]`.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<T> {
    let b = xavier_bound(fan_in, fan_out, gain);
    Tensor::from_fn([fan_in, fan_out], |_| T::from_f64(rng.random_range(-b..=b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gain_is_two_to_minus_two_point_five() {
        assert!((XAVIER_GAIN - 2f64.powf(-2.5)).abs() < 1e-15);
    }

    #[test]
    fn support_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Tensor<f64> = xavier_uniform(16, 48, XAVIER_GAIN, &mut rng);
        let b = xavier_bound(16, 48, XAVIER_GAIN);
        assert!(w.data().iter().all(|v| v.abs() <= b));
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(w, xavier_uniform(16, 48, XAVIER_GAIN, &mut rng2));
    }

    #[test]
    fn sample_mean_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w: Tensor<f64> = xavier_uniform(200, 500, XAVIER_GAIN, &mut rng);
        let n = w.numel() as f64;
        let b = xavier_bound(200, 500, XAVIER_GAIN);
        let std = b / 3f64.sqrt();
        assert!((w.sum() / n).abs() <= 3.0 * std / n.sqrt());
    }
}
