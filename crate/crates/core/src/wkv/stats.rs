use super::WkvState;
use crate::tensor::Scalar;

/// Largest singular value of a row-major `rows × cols` matrix, by power
/// iteration on `AᵀA`.
pub fn spectral_norm<T: Scalar>(a: &[T], rows: usize, cols: usize) -> f64 {
    let a: Vec<f64> = a.iter().map(|x| x.as_f64()).collect();
    // deterministic, non-degenerate start vector
    let mut x: Vec<f64> = (0..cols).map(|j| 1.0 + 0.1 * (j as f64).sin()).collect();
    let mut sigma = 0.0;
    for _ in 0..200 {
        let ax: Vec<f64> = (0..rows)
            .map(|i| {
                a[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(&x)
                    .map(|(p, q)| p * q)
                    .sum()
            })
            .collect();
        let mut atax = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                atax[j] += a[i * cols + j] * ax[i];
            }
        }
        let norm = atax.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm.sqrt();
        x = atax.into_iter().map(|v| v / norm).collect();
        if (next - sigma).abs() <= 1e-13 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// `‖A‖_F² / σ_max²`; 0 for the zero matrix.
pub fn stable_rank<T: Scalar>(a: &[T], rows: usize, cols: usize) -> f64 {
    let sigma = spectral_norm(a, rows, cols);
    if sigma == 0.0 {
        return 0.0;
    }
    let fro: f64 = a.iter().map(|x| x.as_f64().powi(2)).sum();
    fro / (sigma * sigma)
}

/// Health metrics of a state tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateStats {
    pub rms: f64,
    /// Largest per-head stable rank.
    pub max_stable_rank: f64,
}

impl<T: Scalar> WkvState<T> {
    pub fn stats(&self) -> StateStats {
        let [_, _, nv, n] = self.s.shape()[..] else {
            unreachable!("state is rank 4")
        };
        let max_stable_rank = self
            .s
            .data()
            .chunks(nv * n)
            .map(|head| stable_rank(head, nv, n))
            .fold(0.0, f64::max);
        StateStats {
            rms: self.s.rms().as_f64(),
            max_stable_rank,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let a = [3.0, 0.0, 0.0, 0.0, -5.0, 0.0];
        assert!((spectral_norm(&a, 2, 3) - 5.0).abs() < 1e-10);
        assert!((stable_rank(&a, 2, 3) - 34.0 / 25.0).abs() < 1e-10);
    }

    #[test]
    fn rank_one_has_stable_rank_one() {
        let u = [1.0, 2.0];
        let v = [0.5, -1.0, 3.0];
        let a: Vec<f64> = u
            .iter()
            .flat_map(|x| v.iter().map(move |y| x * y))
            .collect();
        assert!((stable_rank(&a, 2, 3) - 1.0).abs() < 1e-10);
    }
}
