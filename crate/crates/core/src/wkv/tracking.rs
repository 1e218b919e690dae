use std::f64::consts::FRAC_1_SQRT_2;

use super::{wkv_recurrent, KernelInputs, WkvState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `perm[i]` is the column holding the 1 in row `i` of the permutation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation(pub Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// Right-multiplies by the transposition matrix swapping `i` and `j`.
    pub fn then_swap(&mut self, i: usize, j: usize) {
        for x in &mut self.0 {
            if *x == i {
                *x = j;
            } else if *x == j {
                *x = i;
            }
        }
    }
}

impl std::fmt::Display for Permutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

/// Composition of transposition matrices computed directly on index arrays.
pub fn compose_transpositions(n: usize, swaps: &[(usize, usize)]) -> Permutation {
    let mut p = Permutation::identity(n);
    for &(i, j) in swaps {
        p.then_swap(i, j);
    }
    p
}

/// `count` uniformly random transpositions of `0..n` (`n ≥ 2`).
pub fn random_transpositions<R: rand::Rng + ?Sized>(
    n: usize,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            (i, j)
        })
        .collect()
}

/// Every word of at most `max_len` transpositions of `0..n`, shortest first.
pub fn transposition_words(n: usize, max_len: usize) -> Vec<Vec<(usize, usize)>> {
    let letters: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let mut words = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|w: &Vec<(usize, usize)>| {
                letters.iter().map(move |&l| {
                    let mut next = w.clone();
                    next.push(l);
                    next
                })
            })
            .collect();
        words.extend(frontier.iter().cloned());
    }
    words
}

#[derive(Debug, Clone)]
pub struct TrackingResult {
    pub permutation: Permutation,
    /// Final `N × N` state of the single head.
    pub state: Tensor<f64>,
    /// Largest distance of any state entry from the 0/1 matrix of `permutation`.
    pub max_deviation: f64,
}

/// Tracks a word of transpositions in `S_n` with the WKV state.
///
/// Each step uses unit decay, no write (`k = v = 0`) and removal key
/// `kk = (e_i − e_j)/√2` with learning rate 2, so the transition is the
/// Householder reflection `I − 2·kk·kkᵀ`, which swaps basis vectors `i` and
/// `j`. Starting from the identity on the first `n` coordinates, the state
/// after the last step is the permutation matrix of the whole word.
pub fn s_n_tracking_demo(
    n: usize,
    head_dim: usize,
    swaps: &[(usize, usize)],
) -> Result<TrackingResult> {
    if n == 0 || n > head_dim {
        return Err(Error::Config(format!(
            "need 1 <= n <= head dim, got n={n}, N={head_dim}"
        )));
    }
    for &(i, j) in swaps {
        if i >= n || j >= n || i == j {
            return Err(Error::Config(format!(
                "invalid transposition ({i} {j}) for n={n}"
            )));
        }
    }
    let big_n = head_dim;
    let s0 = Tensor::from_fn([1, 1, big_n, big_n], |idx| {
        let (row, col) = (idx / big_n, idx % big_n);
        if row == col && row < n {
            1.0
        } else {
            0.0
        }
    });

    let state = if swaps.is_empty() {
        s0
    } else {
        let t = swaps.len();
        let mut kk = vec![0.0; t * big_n];
        for (step, &(i, j)) in swaps.iter().enumerate() {
            kk[step * big_n + i] = FRAC_1_SQRT_2;
            kk[step * big_n + j] = -FRAC_1_SQRT_2;
            let norm: f64 = kk[step * big_n..(step + 1) * big_n]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "removal key must be unit norm");
        }
        let shape = [1, t, 1, big_n];
        let kk = Tensor::new(shape, kk)?;
        let inputs = KernelInputs {
            r: Tensor::zeros(shape),
            w: Tensor::zeros(shape),
            k: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            a_hat: kk.map(|x| -x),
            b_hat: kk.map(|x| 2.0 * x),
            s0: Some(WkvState { s: s0 }),
        };
        wkv_recurrent(&inputs, None)?.state.s
    };

    let state = state.into_reshaped([big_n, big_n])?;
    let permutation = Permutation(
        (0..n)
            .map(|row| {
                (0..big_n)
                    .max_by(|&a, &b| state.at(&[row, a]).total_cmp(&state.at(&[row, b])))
                    .unwrap()
            })
            .collect(),
    );
    let mut max_deviation: f64 = 0.0;
    for row in 0..big_n {
        for col in 0..big_n {
            let expect = if row < n && permutation.0[row] == col {
                1.0
            } else {
                0.0
            };
            max_deviation = max_deviation.max((state.at(&[row, col]) - expect).abs());
        }
    }
    Ok(TrackingResult {
        permutation,
        state,
        max_deviation,
    })
}
