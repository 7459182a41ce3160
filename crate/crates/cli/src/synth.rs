//! Synthetic texture stand-in: classes share a zero mean and differ only in
//! the channel covariance of the local features.
//!
//! Class `k` draws a mixing matrix `A_k` once; every local feature of a class
//! `k` sample is `x = A_k·z + √0.1·e` with `z, e ~ N(0, I)`, so that
//! `Cov(x) = A_k A_kᵀ + 0.1·I`.

use spdagg::{Matrix, SeededRng};

use crate::fts::FtsDataset;
use crate::CliError;

/// Noise floor added to every class covariance.
pub const NOISE_VAR: f64 = 0.1;

/// The per-class mixing matrices `A_k` for a seed (entries `N(0, 1/C₀)`).
pub fn class_factors(num_classes: usize, c0: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = SeededRng::new(seed);
    let scale = 1.0 / (c0 as f64).sqrt();
    (0..num_classes).map(|_| rng.normal_matrix(c0, c0).scale(scale)).collect()
}

/// `Σ_k = A_k A_kᵀ + 0.1·I`.
pub fn class_covariance(a: &Matrix) -> Matrix {
    let c0 = a.rows();
    a.matmul_t(a)
        .expect("square")
        .add(&Matrix::identity(c0).scale(NOISE_VAR))
        .expect("same shape")
}

/// Generates `per_class` samples of each class, interleaved so that sample
/// `i` has label `i mod num_classes`.
pub fn synth_generate(
    num_classes: usize,
    per_class: usize,
    c0: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<FtsDataset, CliError> {
    if num_classes < 2 {
        return Err(CliError::Usage("synthetic data needs at least two classes".into()));
    }
    if per_class == 0 || c0 == 0 || height * width < 2 {
        return Err(CliError::Usage("synthetic data needs samples, channels and two positions".into()));
    }
    let factors = class_factors(num_classes, c0, seed);
    // Sample draws use a stream separate from the class structure.
    let mut rng = SeededRng::new(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let noise = NOISE_VAR.sqrt();
    let positions = height * width;
    let total = num_classes * per_class;
    let mut labels = Vec::with_capacity(total);
    let mut payload = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % num_classes;
        let a = &factors[label];
        let mut sample = vec![0f32; c0 * positions];
        for p in 0..positions {
            let z: Vec<f64> = (0..c0).map(|_| rng.normal()).collect();
            for c in 0..c0 {
                let mixed: f64 = a.row(c).iter().zip(&z).map(|(w, v)| w * v).sum();
                sample[c * positions + p] = (mixed + noise * rng.normal()) as f32;
            }
        }
        labels.push(label);
        payload.push(sample);
    }
    Ok(FtsDataset {
        channels: c0,
        height,
        width,
        num_classes,
        labels,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = synth_generate(3, 4, 5, 2, 3, 11).unwrap();
        let b = synth_generate(3, 4, 5, 2, 3, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(3, 4, 5, 2, 3, 12).unwrap());
        assert_eq!(a.labels, vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn needs_two_classes() {
        assert!(synth_generate(1, 4, 5, 2, 3, 0).is_err());
    }

    #[test]
    fn sample_covariance_approaches_class_covariance() {
        let (c0, h, w) = (6, 10, 10);
        // 100 samples × 100 positions = 10⁴ draws per class.
        let d = synth_generate(2, 100, c0, h, w, 5).unwrap();
        let factors = class_factors(2, c0, 5);
        for (k, a) in factors.iter().enumerate() {
            let sigma = class_covariance(a);
            let mut acc = Matrix::zeros(c0, c0);
            let mut count = 0usize;
            for (label, sample) in d.labels.iter().zip(&d.payload) {
                if *label != k {
                    continue;
                }
                for p in 0..h * w {
                    for i in 0..c0 {
                        for j in 0..c0 {
                            acc[(i, j)] += f64::from(sample[i * h * w + p]) * f64::from(sample[j * h * w + p]);
                        }
                    }
                    count += 1;
                }
            }
            let est = acc.scale(1.0 / count as f64);
            let rel = est.sub(&sigma).unwrap().frobenius_norm() / sigma.frobenius_norm();
            assert!(rel < 0.1, "class {k}: relative error {rel}");
        }
    }

    #[test]
    fn first_order_statistics_carry_no_signal() {
        let (c0, h, w) = (8, 6, 6);
        let d = synth_generate(2, 500, c0, h, w, 9).unwrap();
        let n = h * w;
        let mut means = vec![vec![0.0; c0]; 2];
        let mut sq = 0.0;
        let mut count = 0usize;
        for (label, sample) in d.labels.iter().zip(&d.payload) {
            for c in 0..c0 {
                let pooled: f64 = sample[c * n..(c + 1) * n].iter().map(|v| f64::from(*v)).sum::<f64>() / n as f64;
                means[*label][c] += pooled / 500.0;
            }
            sq += sample.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>();
            count += sample.len();
        }
        let feature_std = (sq / count as f64).sqrt();
        let dist = means[0].iter().zip(&means[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 0.1 * feature_std, "class-mean distance {dist} vs std {feature_std}");
    }
}
