//! Gauss-Newton iterations for GMM-type estimating equations
//! `S^T V^{-1} U = 0`, shared by the streaming engine and the dense oracle.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A Cholesky pivot below this fraction of its diagonal entry counts as a
/// failed factorization.
const PIVOT_RATIO: f64 = 1e-12;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Convergence threshold on the max-abs Newton step and on the max-abs
    /// estimating equation `S^T V^{-1} U`.
    pub tol: f64,
    pub max_iter: usize,
    /// Ridge multiplier applied to `mean(diag(V))` when `V` is singular.
    pub ridge_eps: f64,
    /// Initial step fraction; halved while the trial iterate is non-finite.
    pub damping: f64,
    /// Warn when `N_b^{-1} S_b^T V_b^{-1} S_{b-1}` is not positive definite.
    #[serde(default)]
    pub check_h_pd: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-8,
            max_iter: 100,
            ridge_eps: 1e-8,
            damping: 1.0,
            check_h_pd: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Validation(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(Error::Validation("max_iter must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Validation(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.ridge_eps >= 0.0) {
            return Err(Error::Validation("ridge_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Aggregated score, negative gradient and variability at one iterate.
#[derive(Debug, Clone)]
pub struct Aggregates {
    pub u: DVector<f64>,
    pub s: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl Aggregates {
    pub fn zeros(d: usize, p: usize) -> Self {
        Aggregates {
            u: DVector::zeros(d),
            s: DMatrix::zeros(d, p),
            v: DMatrix::zeros(d, d),
        }
    }

    fn is_finite(&self) -> bool {
        self.u.iter().chain(self.s.iter()).chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Cholesky factor of a symmetric PSD matrix, ridged when the plain
/// factorization fails. The flag reports whether the ridge was needed.
pub fn factor_psd(v: &DMatrix<f64>, ridge_eps: f64) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(ch) = checked_cholesky(v.clone()) {
        return Ok((ch, false));
    }
    let n = v.nrows();
    let mean_diag = v.diagonal().sum() / n as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let ridged = v + DMatrix::identity(n, n) * (ridge_eps * scale);
    match checked_cholesky(ridged) {
        Some(ch) => {
            warn!("variability matrix singular; applied ridge {:.3e}", ridge_eps * scale);
            Ok((ch, true))
        }
        None => Err(Error::Singular(format!(
            "{n}x{n} variability matrix not positive definite after ridge"
        ))),
    }
}

fn checked_cholesky(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let diag = m.diagonal();
    let ch = Cholesky::new(m)?;
    let l = ch.l_dirty();
    for i in 0..diag.len() {
        let piv = l[(i, i)] * l[(i, i)];
        if !piv.is_finite() || piv <= PIVOT_RATIO * diag[i].abs() {
            return None;
        }
    }
    Some(ch)
}

/// Inverse of a symmetric positive definite `p x p` matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let inv = match checked_cholesky(sym.clone()) {
        Some(ch) => ch.inverse(),
        None => sym
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular(format!("{what} is singular")))?,
    };
    if inv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular(format!("{what} is singular")));
    }
    Ok((&inv + inv.transpose()) * 0.5)
}

/// One Gauss-Newton step for `S^T V^{-1} U = 0`.
#[derive(Debug, Clone)]
pub struct GmmStep {
    /// `S^T V^{-1} U`
    pub g: DVector<f64>,
    /// `(S^T V^{-1} S)^{-1} g`
    pub step: DVector<f64>,
    /// `S^T V^{-1} S`
    pub info: DMatrix<f64>,
    pub ridged: bool,
}

pub fn gmm_step(agg: &Aggregates, ridge_eps: f64) -> Result<GmmStep> {
    let (ch, ridged) = factor_psd(&agg.v, ridge_eps)?;
    let vinv_s = ch.solve(&agg.s);
    let vinv_u = ch.solve(&agg.u);
    let info = agg.s.transpose() * vinv_s;
    let info = (&info + info.transpose()) * 0.5;
    let g = agg.s.transpose() * vinv_u;
    let step = match checked_cholesky(info.clone()) {
        Some(c) => c.solve(&g),
        None => info
            .clone()
            .lu()
            .solve(&g)
            .ok_or_else(|| Error::Singular("information matrix S^T V^-1 S is singular".into()))?,
    };
    if step.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular("information matrix S^T V^-1 S is singular".into()));
    }
    Ok(GmmStep { g, step, info, ridged })
}

/// `U^T V^{-1} U`, ridged like the solver when `V` is singular.
pub fn quadratic_form(u: &DVector<f64>, v: &DMatrix<f64>, ridge_eps: f64) -> Result<(f64, bool)> {
    let (ch, ridged) = factor_psd(v, ridge_eps)?;
    Ok((u.dot(&ch.solve(u)), ridged))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub step_norm: f64,
    pub residual_norm: f64,
    pub ridge_events: usize,
}

/// Runs Gauss-Newton from `beta0`. The final call to `eval` is always at the
/// returned estimate, so callers may read per-subject state left behind by
/// the closure.
pub fn gauss_newton<F>(beta0: &[f64], cfg: &SolverConfig, mut eval: F) -> Result<SolveOutcome>
where
    F: FnMut(&[f64]) -> Result<Aggregates>,
{
    cfg.validate()?;
    let mut beta = DVector::from_column_slice(beta0);
    let mut agg = eval(beta.as_slice())?;
    if !agg.is_finite() {
        return Err(Error::Singular("non-finite estimating function at the starting value".into()));
    }
    let mut ridge_events = 0;
    let mut last = (f64::INFINITY, f64::INFINITY);
    for it in 1..=cfg.max_iter {
        let st = gmm_step(&agg, cfg.ridge_eps)?;
        ridge_events += usize::from(st.ridged);
        let step_norm = st.step.amax();
        let residual_norm = st.g.amax();
        last = (step_norm, residual_norm);
        if step_norm < cfg.tol && residual_norm < cfg.tol {
            return Ok(SolveOutcome {
                beta: beta.as_slice().to_vec(),
                iterations: it,
                step_norm,
                residual_norm,
                ridge_events,
            });
        }
        let mut lambda = cfg.damping;
        let mut halvings = 0;
        loop {
            let trial = &beta + &st.step * lambda;
            match eval(trial.as_slice()) {
                Ok(a) if a.is_finite() => {
                    beta = trial;
                    agg = a;
                    break;
                }
                Ok(_) | Err(Error::NonFinitePredictor { .. }) => {
                    halvings += 1;
                    if halvings > MAX_HALVINGS {
                        // leave the closure state at the last good iterate
                        eval(beta.as_slice())?;
                        return Err(Error::NoConvergence {
                            iterations: it,
                            step_norm,
                            residual_norm,
                            best_beta: beta.as_slice().to_vec(),
                        });
                    }
                    lambda *= 0.5;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        step_norm: last.0,
        residual_norm: last.1,
        best_beta: beta.as_slice().to_vec(),
    })
}
