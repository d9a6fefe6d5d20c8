//! Factorized Gaussian values and the closed-form KL divergence.

use crate::error::{CoreError, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Diagonal Gaussian given by mean and standard deviation vectors.
///
/// Used for the global latent (the factorized posterior over z) and for
/// per-dimension predictive distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(CoreError::ShapeMismatch {
                op: "diag_gaussian",
                lhs: vec![mean.len()],
                rhs: vec![std.len()],
            });
        }
        if let Some(&bad) = std.iter().find(|s| !(**s > 0.0)) {
            return Err(CoreError::NonPositiveVariance {
                context: "diag_gaussian",
                value: bad,
            });
        }
        Ok(DiagGaussian { mean, std })
    }

    /// Standard normal N(0, I) of the given dimension.
    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(self.std.iter())
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Closed-form KL(p ‖ q) for factorized Gaussians, summed over dimensions.
pub fn kl_diag_gaussians(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(CoreError::ShapeMismatch {
            op: "kl_diag_gaussians",
            lhs: vec![p.dim()],
            rhs: vec![q.dim()],
        });
    }
    for &s in p.std.iter().chain(q.std.iter()) {
        if !(s > 0.0) || !s.is_finite() {
            return Err(CoreError::NonPositiveVariance {
                context: "kl_diag_gaussians",
                value: s,
            });
        }
    }
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let vp = p.std[i] * p.std[i];
        let vq = q.std[i] * q.std[i];
        let md = p.mean[i] - q.mean[i];
        kl += 0.5 * (vp / vq + md * md / vq - 1.0 + (vq / vp).ln());
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_distributions_have_zero_kl() {
        let p = DiagGaussian::new(vec![0.3, -1.2], vec![0.5, 2.0]).unwrap();
        assert_eq!(kl_diag_gaussians(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn unit_shift_is_half() {
        // KL(N(1,1) ‖ N(0,1)) = 0.5
        let p = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        let q = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
        assert!((kl_diag_gaussians(&p, &q).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn multi_dim_sums_per_dim_terms() {
        let mut rng_vals = vec![];
        for i in 0..8 {
            rng_vals.push((
                0.1 * i as f64 - 0.3,
                0.2 + 0.1 * i as f64,
                -0.2 * i as f64,
                1.5 - 0.1 * i as f64,
            ));
        }
        let p = DiagGaussian::new(
            rng_vals.iter().map(|v| v.0).collect(),
            rng_vals.iter().map(|v| v.1).collect(),
        )
        .unwrap();
        let q = DiagGaussian::new(
            rng_vals.iter().map(|v| v.2).collect(),
            rng_vals.iter().map(|v| v.3).collect(),
        )
        .unwrap();
        let total = kl_diag_gaussians(&p, &q).unwrap();
        let mut sum = 0.0;
        for i in 0..8 {
            let pi = DiagGaussian::new(vec![p.mean[i]], vec![p.std[i]]).unwrap();
            let qi = DiagGaussian::new(vec![q.mean[i]], vec![q.std[i]]).unwrap();
            sum += kl_diag_gaussians(&pi, &qi).unwrap();
        }
        assert!((total - sum).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_std() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        let p = DiagGaussian::standard(1);
        let mut q = DiagGaussian::standard(1);
        q.std[0] = -1.0;
        assert!(kl_diag_gaussians(&p, &q).is_err());
    }
}
