//! GLM mean and variance machinery for marginal longitudinal models.
//!
//! Each family is a canonical link paired with its variance function. The
//! batch-level quantities produced here (means, variances and the derivative
//! matrix `D = dmu/dbeta`) feed every score block downstream.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear predictors are clamped to this range before the logistic map.
pub const LOGIT_ETA_CLAMP: f64 = 35.0;
/// Floor applied to Poisson means wherever `A^{-1/2}` is formed.
pub const POISSON_MU_FLOOR: f64 = 1e-12;
/// `exp` saturates here instead of overflowing to infinity.
const EXP_ETA_MAX: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianIdentity,
    BernoulliLogit,
    PoissonLog,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianIdentity => "gaussian",
            Family::BernoulliLogit => "logit",
            Family::PoissonLog => "poisson",
        }
    }

    /// Checks that an outcome lies in the family's support.
    pub fn check_outcome(self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self {
            Family::GaussianIdentity => true,
            Family::BernoulliLogit => y == 0.0 || y == 1.0,
            Family::PoissonLog => y >= 0.0 && y.fract() == 0.0,
        }
    }

    /// Mean, variance and `dmu/deta` at one linear predictor.
    ///
    /// The variance is the value used inside `A^{-1/2}`, so it carries the
    /// Poisson floor; the derivative does not.
    #[inline]
    pub(crate) fn moments(self, eta: f64) -> (f64, f64, f64) {
        match self {
            Family::GaussianIdentity => (eta, 1.0, 1.0),
            Family::BernoulliLogit => {
                let mu = logistic(eta.clamp(-LOGIT_ETA_CLAMP, LOGIT_ETA_CLAMP));
                let v = mu * (1.0 - mu);
                (mu, v, v)
            }
            Family::PoissonLog => {
                let mu = eta.min(EXP_ETA_MAX).exp();
                (mu, mu.max(POISSON_MU_FLOOR), mu)
            }
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gaussian_identity" | "linear" => Ok(Family::GaussianIdentity),
            "logit" | "bernoulli" | "bernoulli_logit" | "logistic" => Ok(Family::BernoulliLogit),
            "poisson" | "poisson_log" => Ok(Family::PoissonLog),
            other => Err(Error::Validation(format!("unknown family '{other}'"))),
        }
    }
}

#[inline]
fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Inverse link `h(eta)`.
pub fn link_inverse(eta: f64, family: Family) -> f64 {
    match family {
        Family::GaussianIdentity => eta,
        Family::BernoulliLogit => logistic(eta.clamp(-LOGIT_ETA_CLAMP, LOGIT_ETA_CLAMP)),
        Family::PoissonLog => eta.min(EXP_ETA_MAX).exp(),
    }
}

/// Variance function `v(mu)`.
pub fn variance_fn(mu: f64, family: Family) -> Result<f64> {
    if !mu.is_finite() {
        return Err(Error::Domain(format!("non-finite mean {mu}")));
    }
    match family {
        Family::GaussianIdentity => Ok(1.0),
        Family::BernoulliLogit => {
            if mu <= 0.0 || mu >= 1.0 {
                Err(Error::Domain(format!("Bernoulli mean {mu} outside (0, 1)")))
            } else {
                Ok(mu * (1.0 - mu))
            }
        }
        Family::PoissonLog => {
            if mu < 0.0 {
                Err(Error::Domain(format!("Poisson mean {mu} is negative")))
            } else {
                Ok(mu)
            }
        }
    }
}

/// Observations collected on one subject at one updating time.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `n_j x p` design matrix.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub t: f64,
    pub subject_id: String,
    pub batch_index: usize,
}

impl Batch {
    pub fn new(
        subject_id: impl Into<String>,
        batch_index: usize,
        t: f64,
        x: DMatrix<f64>,
        y: DVector<f64>,
    ) -> Result<Self> {
        let batch = Batch {
            x,
            y,
            t,
            subject_id: subject_id.into(),
            batch_index,
        };
        batch.check_shape()?;
        Ok(batch)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    fn check_shape(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() {
            return Err(Error::Dimension {
                context: "batch rows",
                expected: self.x.nrows(),
                actual: self.y.len(),
            });
        }
        if self.y.is_empty() {
            return Err(Error::Validation(format!(
                "subject {} batch {} has no observations",
                self.subject_id, self.batch_index
            )));
        }
        if !self.t.is_finite() {
            return Err(Error::Validation("batch time must be finite".into()));
        }
        if self.batch_index == 0 {
            return Err(Error::Validation("batch_index starts at 1".into()));
        }
        Ok(())
    }

    /// Full invariant check, including the family's outcome support.
    pub fn validate(&self, family: Family) -> Result<()> {
        self.check_shape()?;
        for (k, row) in self.x.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "subject {} batch {}: non-finite covariate at row {}",
                    self.subject_id,
                    self.batch_index,
                    k + 1
                )));
            }
        }
        for (k, &y) in self.y.iter().enumerate() {
            if !family.check_outcome(y) {
                return Err(Error::Domain(format!(
                    "subject {} batch {}: outcome {y} at row {} invalid for {} family",
                    self.subject_id,
                    self.batch_index,
                    k + 1,
                    family.name()
                )));
            }
        }
        Ok(())
    }

    /// Covariates and outcome of the final observation.
    pub fn last_obs(&self) -> Observation {
        self.obs(self.n() - 1)
    }

    pub fn first_obs(&self) -> Observation {
        self.obs(0)
    }

    fn obs(&self, k: usize) -> Observation {
        Observation {
            x: self.x.row(k).iter().copied().collect(),
            y: self.y[k],
        }
    }
}

/// A single `(x, y)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanDeriv {
    pub mu: DVector<f64>,
    pub a_diag: DVector<f64>,
    /// `n_j x p`, row k is `dmu_k/deta * x_k`.
    pub d: DMatrix<f64>,
}

/// Means, variances and the derivative matrix for one batch at `beta`.
pub fn mean_deriv(batch: &Batch, beta: &[f64], family: Family) -> Result<MeanDeriv> {
    let (n, p) = (batch.n(), batch.p());
    if beta.len() != p {
        return Err(Error::Dimension {
            context: "beta length",
            expected: p,
            actual: beta.len(),
        });
    }
    let mut mu = DVector::zeros(n);
    let mut a_diag = DVector::zeros(n);
    let mut d = DMatrix::zeros(n, p);
    for k in 0..n {
        let eta = linear_predictor(batch.x.row(k).iter().copied(), beta);
        if !eta.is_finite() {
            return Err(Error::NonFinitePredictor { row: k + 1 });
        }
        let (m, v, dmu) = family.moments(eta);
        mu[k] = m;
        a_diag[k] = v;
        for c in 0..p {
            d[(k, c)] = dmu * batch.x[(k, c)];
        }
    }
    Ok(MeanDeriv { mu, a_diag, d })
}

#[inline]
pub(crate) fn linear_predictor(x: impl Iterator<Item = f64>, beta: &[f64]) -> f64 {
    x.zip(beta).map(|(a, b)| a * b).sum()
}
