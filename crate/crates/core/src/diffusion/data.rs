//! Four procedurally drawn 8×8 glyph classes and their class-token
//! conditioning.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 8;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; CLASSES] = ["bar", "cross", "disk", "checker"];
/// Token id of the reserved first conditioning row.
pub const BOS: usize = CLASSES;

const JITTER: f64 = 0.15;

/// Noise-free glyph for `class`, foreground +1 on background −1.
pub fn template(class: usize) -> [f64; PIXELS] {
    let mut img = [-1.0; PIXELS];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let on = match class {
                0 => (3..=4).contains(&r) && (1..=6).contains(&c),
                1 => (3..=4).contains(&r) || (3..=4).contains(&c),
                2 => {
                    let (dr, dc) = (r as f64 - 3.5, c as f64 - 3.5);
                    dr * dr + dc * dc <= 7.0
                }
                _ => (r / 2 + c / 2) % 2 == 0,
            };
            if on {
                img[r * SIDE + c] = 1.0;
            }
        }
    }
    img
}

/// A batch of flattened images with their conditioning.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    /// `[B, 64, C]`
    pub x0: Tensor,
    /// `[B, L, D_q]`
    pub cond: Tensor,
    pub labels: Vec<usize>,
}

/// Draws one jittered glyph per label, replicated over `channels`.
pub fn glyphs<R: Rng + ?Sized>(labels: &[usize], channels: usize, rng: &mut R) -> Result<Tensor> {
    let jitter = Normal::new(0.0, JITTER).expect("valid std");
    let mut data = Vec::with_capacity(labels.len() * PIXELS * channels);
    for &label in labels {
        if label >= CLASSES {
            return Err(Error::Config(format!(
                "glyph class {label} outside 0..{CLASSES}"
            )));
        }
        for px in template(label) {
            let v = (px + jitter.sample(rng)).clamp(-1.0, 1.0);
            data.extend(std::iter::repeat_n(v, channels));
        }
    }
    Tensor::new([labels.len(), PIXELS, channels], data)
}

/// One-hot token rows `[BOS, class, class, …]` of length `len`; `None`
/// gives an all-zero (unconditional) row block.
pub fn class_cond(labels: &[Option<usize>], len: usize, d_q: usize) -> Result<Tensor> {
    if d_q <= BOS {
        return Err(Error::Config(format!(
            "D_q={d_q} too small for {} token ids",
            BOS + 1
        )));
    }
    let mut data = vec![0.0; labels.len() * len * d_q];
    for (b, label) in labels.iter().enumerate() {
        let Some(class) = *label else { continue };
        let rows = &mut data[b * len * d_q..(b + 1) * len * d_q];
        rows[BOS] = 1.0;
        for row in rows.chunks_mut(d_q).skip(1) {
            row[class] = 1.0;
        }
    }
    Tensor::new([labels.len(), len, d_q], data)
}

/// Per-class mean image of `per_class` fresh draws, shape `[4, 64·C]`.
pub fn class_centroids<R: Rng + ?Sized>(
    per_class: usize,
    channels: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(CLASSES * PIXELS * channels);
    for class in 0..CLASSES {
        let imgs = glyphs(&vec![class; per_class], channels, rng)?;
        let width = PIXELS * channels;
        let mut mean = vec![0.0; width];
        for img in imgs.data().chunks(width) {
            for (m, v) in mean.iter_mut().zip(img) {
                *m += v / per_class as f64;
            }
        }
        out.extend(mean);
    }
    Tensor::new([CLASSES, PIXELS * channels], out)
}

/// Index of the nearest centroid (Euclidean) for each flattened image.
pub fn nearest_centroid(centroids: &Tensor, images: &Tensor) -> Vec<usize> {
    let width = centroids.last_dim();
    images
        .data()
        .chunks(width)
        .map(|img| {
            centroids
                .data()
                .chunks(width)
                .map(|c| c.iter().zip(img).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least one centroid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn templates_are_distinct_and_in_range() {
        let t: Vec<_> = (0..CLASSES).map(template).collect();
        for i in 0..CLASSES {
            assert!(t[i].iter().all(|&v| v == 1.0 || v == -1.0));
            for j in 0..i {
                let diff = t[i].iter().zip(&t[j]).filter(|(a, b)| a != b).count();
                assert!(diff >= 8, "classes {i} and {j} differ in {diff} pixels");
            }
        }
    }

    #[test]
    fn glyphs_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = glyphs(&[0, 1, 2, 3, 3], 2, &mut rng).unwrap();
        assert_eq!(g.shape(), [5, 64, 2]);
        assert!(g.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(glyphs(&[4], 1, &mut rng).is_err());
    }

    #[test]
    fn cond_layout() {
        let c = class_cond(&[Some(2), None], 5, 8).unwrap();
        assert_eq!(c.shape(), [2, 5, 8]);
        assert_eq!(c.at(&[0, 0, BOS]), 1.0);
        for t in 1..5 {
            assert_eq!(c.at(&[0, t, 2]), 1.0);
            assert_eq!(c.data()[(t * 8)..(t * 8 + 8)].iter().sum::<f64>(), 1.0);
        }
        assert!(c.data()[40..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centroids_classify_fresh_glyphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cents = class_centroids(50, 1, &mut rng).unwrap();
        let labels: Vec<usize> = (0..200).map(|i| i % CLASSES).collect();
        let imgs = glyphs(&labels, 1, &mut rng).unwrap();
        assert_eq!(nearest_centroid(&cents, &imgs), labels);
    }
}
