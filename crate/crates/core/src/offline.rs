//! Dense reference implementations on the cumulative data.
//!
//! Everything here materializes the full `N_b x N_b` basis matrices and the
//! time-decay weight matrix, so it serves as an oracle for the blockwise
//! streaming path and as the batch-1 initializer. A size guard keeps it off
//! production-sized data.

use nalgebra::{DMatrix, DVector};

use crate::blocks::{cross_batch_blocks, within_batch_blocks, BasisSet};
use crate::engine::{fit_stream, ModelSpec, QMode};
use crate::error::{Error, Result};
use crate::inference::{covariance_from, FitReport};
use crate::model::{mean_deriv, Batch, Family};
use crate::solver::{gauss_newton, Aggregates, SolverConfig};

/// Largest per-subject cumulative length the dense path will materialize.
pub const DENSE_GUARD: usize = 5000;

/// Cumulative data: one ordered list of batches per subject, all subjects
/// sharing the same batch times.
#[derive(Debug, Clone)]
pub struct CumulativeData {
    subjects: Vec<Vec<Batch>>,
    times: Vec<f64>,
    p: usize,
}

impl CumulativeData {
    /// Builds from `by_time[j][i]`, batch j of subject i.
    pub fn from_batches(by_time: &[Vec<Batch>]) -> Result<Self> {
        let first = by_time
            .first()
            .filter(|b| !b.is_empty())
            .ok_or_else(|| Error::Validation("cumulative data needs at least one batch".into()))?;
        let p = first[0].p();
        let mut ids: Vec<&str> = first.iter().map(|b| b.subject_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != first.len() {
            return Err(Error::Validation("duplicate subject in batch 1".into()));
        }
        let mut subjects: Vec<Vec<Batch>> = vec![Vec::with_capacity(by_time.len()); ids.len()];
        let mut times = Vec::with_capacity(by_time.len());
        for (j, group) in by_time.iter().enumerate() {
            let t = group
                .first()
                .map(|b| b.t)
                .ok_or_else(|| Error::Validation(format!("batch {} is empty", j + 1)))?;
            if let Some(&prev) = times.last() {
                if t <= prev {
                    return Err(Error::Validation(format!("batch times must increase: {t} after {prev}")));
                }
            }
            times.push(t);
            if group.len() != ids.len() {
                return Err(Error::Validation(format!(
                    "batch {} has {} subjects, expected {}",
                    j + 1,
                    group.len(),
                    ids.len()
                )));
            }
            for b in group {
                if b.p() != p {
                    return Err(Error::Dimension {
                        context: "covariate count",
                        expected: p,
                        actual: b.p(),
                    });
                }
                if b.t != t {
                    return Err(Error::Validation(format!(
                        "subject {} batch {} has time {} but the batch time is {t}",
                        b.subject_id,
                        j + 1,
                        b.t
                    )));
                }
                let i = ids
                    .binary_search(&b.subject_id.as_str())
                    .map_err(|_| Error::Validation(format!("subject {} missing from batch 1", b.subject_id)))?;
                if subjects[i].len() != j {
                    return Err(Error::Validation(format!("duplicate subject {} in batch {}", b.subject_id, j + 1)));
                }
                subjects[i].push(b.clone());
            }
        }
        Ok(CumulativeData { subjects, times, p })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.subjects.len()
    }

    /// `N_b` of the longest subject series.
    pub fn max_length(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| s.iter().map(Batch::n).sum::<usize>())
            .max()
            .unwrap_or(0)
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Validation(format!("dense oracle needs q in (0, 1], got {q}")));
    }
    Ok(())
}

/// Dense per-subject extended score `U*_i` and negative gradient `S*_i`.
pub fn dense_subject_scores(
    data: &CumulativeData,
    beta: &[f64],
    q: f64,
    family: Family,
    basis: BasisSet,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    check_q(q)?;
    let n_max = data.max_length();
    if n_max > DENSE_GUARD {
        return Err(Error::GuardExceeded {
            n: n_max,
            limit: DENSE_GUARD,
        });
    }
    let t_b = *data.times.last().expect("non-empty");
    let p = data.p;
    data.subjects
        .iter()
        .map(|series| {
            let n: usize = series.iter().map(Batch::n).sum();
            let mut x = DMatrix::zeros(n, p);
            let mut y = DVector::zeros(n);
            let mut w = DVector::zeros(n);
            let mut row = 0;
            for (batch, &t) in series.iter().zip(&data.times) {
                let wt = q.powf(t_b - t);
                for k in 0..batch.n() {
                    x.row_mut(row).copy_from(&batch.x.row(k));
                    y[row] = batch.y[k];
                    w[row] = wt;
                    row += 1;
                }
            }
            let stacked = Batch::new(series[0].subject_id.clone(), 1, t_b, x, y)?;
            let md = mean_deriv(&stacked, beta, family)?;
            let a_inv_half = DMatrix::from_diagonal(&md.a_diag.map(|a| 1.0 / a.sqrt()));
            let weights = DMatrix::from_diagonal(&w);
            let resid = &stacked.y - &md.mu;
            let left = md.d.transpose() * &a_inv_half;
            let right = &a_inv_half * &weights;
            let mut bases = vec![DMatrix::<f64>::identity(n, n)];
            if basis == BasisSet::Ar1 {
                bases.push(DMatrix::from_fn(n, n, |r, c| if r.abs_diff(c) == 1 { 1.0 } else { 0.0 }));
            }
            let d = p * bases.len();
            let mut u = DVector::zeros(d);
            let mut s = DMatrix::zeros(d, p);
            for (k, m) in bases.iter().enumerate() {
                let core = &left * m * &right;
                u.rows_mut(k * p, p).copy_from(&(&core * &resid));
                s.rows_mut(k * p, p).copy_from(&(&core * &md.d));
            }
            Ok((u, s))
        })
        .collect()
}

/// Per-subject `U*_i` and `S*_i` assembled from batch and cross-batch blocks
/// with their decay weights, without forming any `N_b x N_b` matrix.
pub fn blockwise_subject_scores(
    data: &CumulativeData,
    beta: &[f64],
    q: f64,
    family: Family,
    basis: BasisSet,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    check_q(q)?;
    let p = data.p;
    let t_b = *data.times.last().expect("non-empty");
    let w: Vec<f64> = data.times.iter().map(|t| q.powf(t_b - t)).collect();
    data.subjects
        .iter()
        .map(|series| {
            let mut u1 = DVector::zeros(p);
            let mut u2 = DVector::zeros(p);
            let mut s1 = DMatrix::zeros(p, p);
            let mut s2 = DMatrix::zeros(p, p);
            for (j, batch) in series.iter().enumerate() {
                let wb = within_batch_blocks(batch, beta, family)?;
                u1 += &wb.u1 * w[j];
                s1 += &wb.s1 * w[j];
                if basis == BasisSet::Independence {
                    continue;
                }
                u2 += &wb.u2 * w[j];
                s2 += &wb.s2 * w[j];
                if j > 0 {
                    let cb = cross_batch_blocks(&series[j - 1].last_obs(), &batch.first_obs(), beta, family)?;
                    u2 += &cb.u_fwd * w[j] + &cb.u_bwd * w[j - 1];
                    s2 += &cb.s_fwd * w[j] + &cb.s_bwd * w[j - 1];
                }
            }
            Ok(match basis {
                BasisSet::Independence => (u1, s1),
                BasisSet::Ar1 => (
                    crate::blocks::stack_extended(&u1, &u2)?,
                    crate::blocks::stack_gradient(&s1, &s2)?,
                ),
            })
        })
        .collect()
}

/// `U*_b(beta)`, summed over subjects.
pub fn dense_extended_score(
    data: &CumulativeData,
    beta: &[f64],
    q: f64,
    family: Family,
    basis: BasisSet,
) -> Result<DVector<f64>> {
    let per = dense_subject_scores(data, beta, q, family, basis)?;
    let d = data.p * basis.s_count();
    Ok(per.iter().fold(DVector::zeros(d), |acc, (u, _)| acc + u))
}

pub fn dense_aggregates(
    data: &CumulativeData,
    beta: &[f64],
    q: f64,
    family: Family,
    basis: BasisSet,
) -> Result<Aggregates> {
    let per = dense_subject_scores(data, beta, q, family, basis)?;
    let mut agg = Aggregates::zeros(data.p * basis.s_count(), data.p);
    for (u, s) in &per {
        agg.u += u;
        agg.s += s;
        agg.v += u * u.transpose();
    }
    Ok(agg)
}

#[derive(Debug, Clone)]
pub struct OfflineFit {
    pub beta: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub ridge_events: usize,
}

/// Minimizes the dense weighted QIF on the cumulative data.
///
/// The independence-working root is solved first and used as the starting
/// value for the two-basis problem.
pub fn offline_fit(
    data: &CumulativeData,
    q: f64,
    family: Family,
    basis: BasisSet,
    config: &SolverConfig,
) -> Result<OfflineFit> {
    check_q(q)?;
    let zero = vec![0.0; data.p];
    let mut ridge_events = 0;
    let start = if basis == BasisSet::Ar1 {
        let ind = gauss_newton(&zero, config, |b| dense_aggregates(data, b, q, family, BasisSet::Independence))?;
        ridge_events += ind.ridge_events;
        ind.beta
    } else {
        zero
    };
    let sol = gauss_newton(&start, config, |b| dense_aggregates(data, b, q, family, basis))?;
    ridge_events += sol.ridge_events;
    let agg = dense_aggregates(data, &sol.beta, q, family, basis)?;
    let (cov, ridged) = covariance_from(&agg.s, &agg.v, config.ridge_eps)?;
    Ok(OfflineFit {
        beta: sol.beta,
        cov,
        iterations: sol.iterations,
        residual_norm: sol.residual_norm,
        ridge_events: ridge_events + usize::from(ridged),
    })
}

/// Streaming fit restricted to the identity basis: the working-independence
/// comparator. Returns one report per batch.
pub fn independent_online_fit(
    by_time: &[Vec<Batch>],
    family: Family,
    q_mode: QMode,
    config: &SolverConfig,
    level: f64,
) -> Result<Vec<FitReport>> {
    let p = by_time
        .first()
        .and_then(|g| g.first())
        .map(Batch::p)
        .ok_or_else(|| Error::Validation("empty stream".into()))?;
    let model = ModelSpec {
        family,
        p,
        basis: BasisSet::Independence,
    };
    fit_stream(by_time, model, q_mode, config, level)
}
