//! Class-conditional Gaussian with a tied covariance: class means, pooled
//! within-class scatter, and the negative minimum Mahalanobis distance as a
//! confidence score.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky, forward_substitute, squared_norm};

/// Relative ridge: ε = RIDGE_SCALE · trace(Σ̂)/d.
pub const RIDGE_SCALE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MahalanobisError {
    #[error("class {class} has {count} examples, need at least 2")]
    TooFewExamples { class: usize, count: usize },
    #[error("feature {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("no features to fit")]
    Empty,
    #[error("regularized covariance is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisParams {
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    /// Tied covariance, row-major d×d, before the ridge.
    pub covariance: Vec<f64>,
    pub ridge: f64,
    /// Lower Cholesky factor of `covariance + ridge·I`.
    pub cholesky: Vec<f64>,
    pub s_min: f64,
    pub s_max: f64,
}

impl MahalanobisParams {
    /// Fits means and the pooled covariance `(1/N) Σ_c Σ_{x∈c} (x−μ_c)(x−μ_c)ᵀ`,
    /// then records the score range over the fitting set.
    pub fn fit(features: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self, MahalanobisError> {
        let dim = features.first().ok_or(MahalanobisError::Empty)?.len();
        let mut counts = vec![0usize; num_classes];
        let mut sums = vec![vec![0.0; dim]; num_classes];
        for (index, (x, &y)) in features.iter().zip(labels).enumerate() {
            if x.len() != dim {
                return Err(MahalanobisError::DimensionMismatch { expected: dim, got: x.len() });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(MahalanobisError::NonFinite { index });
            }
            if y >= num_classes {
                return Err(MahalanobisError::LabelOutOfRange { label: y, num_classes });
            }
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(x) {
                *s += v;
            }
        }
        if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
            return Err(MahalanobisError::TooFewExamples { class, count });
        }
        let means: Vec<Vec<f64>> =
            sums.into_iter().zip(&counts).map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect()).collect();

        let n = features.len() as f64;
        let mut covariance = vec![0.0; dim * dim];
        for (x, &y) in features.iter().zip(labels) {
            let centered: Vec<f64> = x.iter().zip(&means[y]).map(|(a, b)| a - b).collect();
            for i in 0..dim {
                let ci = centered[i];
                for j in i..dim {
                    covariance[i * dim + j] += ci * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = covariance[i * dim + j] / n;
                covariance[i * dim + j] = v;
                covariance[j * dim + i] = v;
            }
        }
        let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
        // A zero scatter (every class collapsed to its mean) still needs a
        // positive ridge, so fall back to an absolute one.
        let ridge = if trace > 0.0 { RIDGE_SCALE * trace / dim as f64 } else { RIDGE_SCALE };
        let mut regularized = covariance.clone();
        for i in 0..dim {
            regularized[i * dim + i] += ridge;
        }
        let cholesky = cholesky(&regularized, dim).map_err(|_| MahalanobisError::NotPositiveDefinite)?;

        let mut params = Self { dim, means, covariance, ridge, cholesky, s_min: 0.0, s_max: 0.0 };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in features {
            let s = params.score_unchecked(x);
            lo = lo.min(s);
            hi = hi.max(s);
        }
        params.s_min = lo;
        params.s_max = hi;
        Ok(params)
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    /// `(x−μ_c)ᵀ (Σ̂+εI)⁻¹ (x−μ_c)` for every class.
    pub fn distances(&self, x: &[f64]) -> Result<Vec<f64>, MahalanobisError> {
        if x.len() != self.dim {
            return Err(MahalanobisError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(self.distances_unchecked(x))
    }

    fn distances_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.means
            .iter()
            .map(|mu| {
                let centered: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
                squared_norm(&forward_substitute(&self.cholesky, &centered, self.dim))
            })
            .collect()
    }

    fn score_unchecked(&self, x: &[f64]) -> f64 {
        -self.distances_unchecked(x).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// `s_M(x) = −min_c d(x, c)`; higher is more in-distribution.
    pub fn score(&self, x: &[f64]) -> Result<f64, MahalanobisError> {
        if x.len() != self.dim {
            return Err(MahalanobisError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(self.score_unchecked(x))
    }

    /// True when every fitting example scored the same, making the min–max
    /// normalization undefined.
    pub fn is_degenerate(&self) -> bool {
        !(self.s_max > self.s_min)
    }

    /// Min–max rescaling of a raw score: 0 at `s_max`, 1 at `s_min`, clamped
    /// to [0, 1]. A degenerate fit maps everything to 0.
    pub fn normalize(&self, s: f64) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        ((self.s_max - s) / (self.s_max - self.s_min)).clamp(0.0, 1.0)
    }

    pub fn normalized_score(&self, x: &[f64]) -> Result<f64, MahalanobisError> {
        Ok(self.normalize(self.score(x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec<f64>> {
        v.iter().map(|&(a, b)| vec![a, b]).collect()
    }

    #[test]
    fn hand_computed_two_class_fit() {
        let x = pts(&[(0.0, 0.0), (2.0, 0.0), (0.0, 2.0), (2.0, 2.0)]);
        let p = MahalanobisParams::fit(&x, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(p.means, vec![vec![1.0, 0.0], vec![1.0, 2.0]]);
        assert_eq!(p.covariance, vec![1.0, 0.0, 0.0, 0.0]);
        assert!((p.ridge - 1e-6 * 0.5).abs() < 1e-18);
    }

    #[test]
    fn collapsed_classes_still_factor() {
        let x = pts(&[(1.0, 1.0), (1.0, 1.0), (3.0, 0.0), (3.0, 0.0)]);
        let p = MahalanobisParams::fit(&x, &[0, 0, 1, 1], 2).unwrap();
        assert!(p.covariance.iter().all(|&v| v == 0.0));
        assert!(p.ridge > 0.0);
        assert_eq!(p.score(&[1.0, 1.0]).unwrap(), 0.0);
        assert!(p.is_degenerate());
        assert_eq!(p.normalize(-5.0), 0.0);
    }

    #[test]
    fn fit_errors() {
        let x = pts(&[(0.0, 0.0), (1.0, 0.0), (5.0, 5.0)]);
        assert_eq!(
            MahalanobisParams::fit(&x, &[0, 0, 1], 2),
            Err(MahalanobisError::TooFewExamples { class: 1, count: 1 })
        );
        let bad = pts(&[(0.0, f64::NAN), (1.0, 0.0), (5.0, 5.0), (4.0, 4.0)]);
        assert_eq!(MahalanobisParams::fit(&bad, &[0, 0, 1, 1], 2), Err(MahalanobisError::NonFinite { index: 0 }));
    }

    #[test]
    fn euclidean_case_and_zero_distance() {
        let x = pts(&[(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)]);
        // single class at the origin with covariance diag(0.5, 0.5)
        let p = MahalanobisParams::fit(&x, &[0, 0, 0, 0], 1).unwrap();
        let expected = -(25.0 / (0.5 + p.ridge));
        assert!((p.score(&[3.0, 4.0]).unwrap() - expected).abs() < 1e-9);
        assert_eq!(p.score(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(p.score(&[1.0]), Err(MahalanobisError::DimensionMismatch { .. })));
    }

    #[test]
    fn normalization_endpoints() {
        let x = pts(&[(0.0, 0.0), (2.0, 0.1), (0.0, 2.0), (2.3, 2.0), (1.0, 1.0)]);
        let p = MahalanobisParams::fit(&x, &[0, 0, 1, 1, 1], 2).unwrap();
        assert_eq!(p.normalize(p.s_max), 0.0);
        assert_eq!(p.normalize(p.s_min), 1.0);
        assert!((p.normalize(0.5 * (p.s_min + p.s_max)) - 0.5).abs() < 1e-12);
        assert_eq!(p.normalize(p.s_min - 100.0), 1.0);
        assert_eq!(p.normalize(p.s_max + 100.0), 0.0);
    }
}
