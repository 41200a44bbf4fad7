//! Sandwich covariance, Wald intervals and p-values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::solver::{factor_psd, spd_inverse};

/// `{S^T V^{-1} S}^{-1}`, symmetrized. The flag reports a ridged `V`.
pub fn covariance_from(s: &DMatrix<f64>, v: &DMatrix<f64>, ridge_eps: f64) -> Result<(DMatrix<f64>, bool)> {
    let (ch, ridged) = factor_psd(v, ridge_eps)?;
    let info = s.transpose() * ch.solve(s);
    let cov = spd_inverse(&info, "Godambe information S^T V^-1 S")?;
    Ok((cov, ridged))
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Standard normal quantile.
pub fn normal_quantile(u: f64) -> f64 {
    standard_normal().inverse_cdf(u)
}

pub fn normal_cdf(z: f64) -> f64 {
    standard_normal().cdf(z)
}

/// Estimates and Wald inference for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub batch_index: usize,
    pub t_b: f64,
    pub beta: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub std_err: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub wald_z: Vec<f64>,
    pub p_values: Vec<f64>,
    pub level: f64,
    /// Decay parameter used for this batch; `None` for the initial batch.
    pub q_used: Option<f64>,
    pub n_iterations: usize,
}

impl FitReport {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn ci_length(&self, k: usize) -> f64 {
        self.ci_upper[k] - self.ci_lower[k]
    }

    pub fn covers(&self, k: usize, truth: f64) -> bool {
        self.ci_lower[k] <= truth && truth <= self.ci_upper[k]
    }
}

/// Fills standard errors, intervals at `level`, z statistics and two-sided
/// p-values from `beta` and `cov`.
pub fn confidence_intervals(
    beta: &DVector<f64>,
    cov: &DMatrix<f64>,
    level: f64,
    batch_index: usize,
    t_b: f64,
    q_used: Option<f64>,
    n_iterations: usize,
) -> Result<FitReport> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let p = beta.len();
    if cov.shape() != (p, p) {
        return Err(Error::Dimension {
            context: "covariance",
            expected: p * p,
            actual: cov.nrows() * cov.ncols(),
        });
    }
    let z_crit = normal_quantile(0.5 * (1.0 + level));
    let mut report = FitReport {
        batch_index,
        t_b,
        beta: beta.iter().copied().collect(),
        cov: (0..p).map(|r| cov.row(r).iter().copied().collect()).collect(),
        std_err: Vec::with_capacity(p),
        ci_lower: Vec::with_capacity(p),
        ci_upper: Vec::with_capacity(p),
        wald_z: Vec::with_capacity(p),
        p_values: Vec::with_capacity(p),
        level,
        q_used,
        n_iterations,
    };
    for k in 0..p {
        let se = cov[(k, k)].max(0.0).sqrt();
        let b = beta[k];
        let z = if se > 0.0 {
            b / se
        } else if b == 0.0 {
            0.0
        } else {
            b.signum() * f64::INFINITY
        };
        let pv = erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
        report.std_err.push(se);
        report.ci_lower.push(b - z_crit * se);
        report.ci_upper.push(b + z_crit * se);
        report.wald_z.push(z);
        report.p_values.push(pv);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(beta: f64, var: f64, level: f64) -> FitReport {
        confidence_intervals(
            &DVector::from_element(1, beta),
            &DMatrix::from_element(1, 1, var),
            level,
            1,
            1.0,
            None,
            1,
        )
        .unwrap()
    }

    #[test]
    fn interval_half_widths() {
        let r = report(0.0, 0.01, 0.95);
        assert!((r.ci_lower[0] + 0.196).abs() < 1e-3);
        assert!((r.ci_upper[0] - 0.196).abs() < 1e-3);
        let r = report(0.0, 1.0, 0.5);
        assert!((r.ci_upper[0] - 0.6745).abs() < 1e-3);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let r = report(1.3, 0.0, 0.95);
        assert_eq!(r.ci_lower[0], 1.3);
        assert_eq!(r.ci_upper[0], 1.3);
        assert_eq!(r.p_values[0], 0.0);
        let r = report(0.0, 0.0, 0.95);
        assert_eq!(r.p_values[0], 1.0);
    }

    #[test]
    fn rejects_bad_level() {
        for level in [0.0, 1.0, -0.2, 1.5] {
            assert!(confidence_intervals(
                &DVector::zeros(1),
                &DMatrix::identity(1, 1),
                level,
                1,
                1.0,
                None,
                1
            )
            .is_err());
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for k in 1..=999 {
            let u = k as f64 / 1000.0;
            assert!((normal_cdf(normal_quantile(u)) - u).abs() < 1e-8, "u = {u}");
        }
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn p_values_two_sided() {
        let r = report(1.959_963_984_540_054, 1.0, 0.95);
        assert!((r.p_values[0] - 0.05).abs() < 1e-9);
    }

    #[test]
    fn covariance_homogeneity() {
        let s = DMatrix::from_row_slice(4, 2, &[2.0, 0.1, 0.3, 1.5, 0.7, -0.2, 0.1, 0.9]);
        let us: Vec<DVector<f64>> = (0..7)
            .map(|i| DVector::from_fn(4, |r, _| ((i * 4 + r) as f64 * 0.37).powi(2).sin()))
            .collect();
        let v = us.iter().fold(DMatrix::zeros(4, 4), |acc, u| acc + u * u.transpose());
        let c = 3.0;
        let (cov, _) = covariance_from(&s, &v, 1e-8).unwrap();
        let (cov_c, _) = covariance_from(&s, &(&v * (c * c)), 1e-8).unwrap();
        let err = (&cov_c - &cov * (c * c)).amax() / cov_c.amax();
        assert!(err < 1e-12, "relative error {err:e}, cov {cov}");
        assert_eq!(cov, cov.transpose());
        assert!(cov.clone().symmetric_eigen().eigenvalues.min() >= 0.0);
    }
}
