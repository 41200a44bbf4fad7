//! Batch-level and cross-batch score blocks of the extended score.
//!
//! With `G = A^{-1/2} D` and `e = A^{-1/2} (y - mu)` every block is a
//! bilinear form in standardized rows: the identity basis pairs row k with
//! itself, the off-diagonal basis pairs row k with its neighbours, and the
//! cross-batch blocks pair the last row of one batch with the first row of
//! the next. The off-diagonal basis is applied as a neighbour-sum stencil.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{linear_predictor, Batch, Family, Observation};

/// Basis matrices approximating the inverse working correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSet {
    /// `M1 = I` only: working independence.
    Independence,
    /// `M1 = I` and `M2` with ones on the two main off-diagonals (AR(1)).
    Ar1,
}

impl BasisSet {
    pub fn s_count(self) -> usize {
        match self {
            BasisSet::Independence => 1,
            BasisSet::Ar1 => 2,
        }
    }

    pub fn from_count(s: usize) -> Result<Self> {
        match s {
            1 => Ok(BasisSet::Independence),
            2 => Ok(BasisSet::Ar1),
            other => Err(Error::Validation(format!("basis count must be 1 or 2, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WithinBlocks {
    pub u1: DVector<f64>,
    pub u2: DVector<f64>,
    pub s1: DMatrix<f64>,
    pub s2: DMatrix<f64>,
}

/// Rank-one blocks linking the last observation of batch j to the first of
/// batch j+1.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossBlocks {
    /// `U_{j,j+1}`
    pub u_fwd: DVector<f64>,
    /// `U_{j+1,j}`
    pub u_bwd: DVector<f64>,
    pub s_fwd: DMatrix<f64>,
    pub s_bwd: DMatrix<f64>,
}

/// Standardized derivative rows and residuals for one batch, reused across
/// Newton iterations to avoid reallocating.
#[derive(Debug, Default, Clone)]
pub(crate) struct Scratch {
    /// Row-major `n x p`.
    g: Vec<f64>,
    e: Vec<f64>,
    g_last: Vec<f64>,
    g_first: Vec<f64>,
}

impl Scratch {
    fn standardize(&mut self, batch: &Batch, beta: &[f64], family: Family) -> Result<()> {
        let (n, p) = (batch.n(), batch.p());
        self.g.clear();
        self.g.resize(n * p, 0.0);
        self.e.clear();
        self.e.resize(n, 0.0);
        for k in 0..n {
            let eta = linear_predictor(batch.x.row(k).iter().copied(), beta);
            if !eta.is_finite() {
                return Err(Error::NonFinitePredictor { row: k + 1 });
            }
            let (mu, v, dmu) = family.moments(eta);
            let inv_sd = 1.0 / v.sqrt();
            self.e[k] = (batch.y[k] - mu) * inv_sd;
            let scale = dmu * inv_sd;
            let row = &mut self.g[k * p..(k + 1) * p];
            for (c, slot) in row.iter_mut().enumerate() {
                *slot = scale * batch.x[(k, c)];
            }
        }
        Ok(())
    }
}

/// Standardized derivative row and residual of a single observation.
fn standardize_obs(obs: &Observation, beta: &[f64], family: Family, g: &mut Vec<f64>) -> Result<f64> {
    let eta = linear_predictor(obs.x.iter().copied(), beta);
    if !eta.is_finite() {
        return Err(Error::NonFinitePredictor { row: 1 });
    }
    let (mu, v, dmu) = family.moments(eta);
    let inv_sd = 1.0 / v.sqrt();
    g.clear();
    g.extend(obs.x.iter().map(|x| dmu * inv_sd * x));
    Ok((obs.y - mu) * inv_sd)
}

fn check_beta(p: usize, beta: &[f64]) -> Result<()> {
    if beta.len() != p {
        return Err(Error::Dimension {
            context: "beta length",
            expected: p,
            actual: beta.len(),
        });
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Validation("beta must be finite".into()));
    }
    Ok(())
}

/// Within-batch blocks `U^(1), U^(2), S^(1), S^(2)`.
pub fn within_batch_blocks(batch: &Batch, beta: &[f64], family: Family) -> Result<WithinBlocks> {
    let p = batch.p();
    check_beta(p, beta)?;
    let mut scratch = Scratch::default();
    scratch.standardize(batch, beta, family)?;
    let mut u = vec![0.0; 2 * p];
    let mut s = vec![0.0; 2 * p * p];
    accumulate_within(&scratch, batch.n(), p, BasisSet::Ar1, &mut u, &mut s);
    Ok(WithinBlocks {
        u1: DVector::from_column_slice(&u[..p]),
        u2: DVector::from_column_slice(&u[p..]),
        s1: DMatrix::from_row_slice(p, p, &s[..p * p]),
        s2: DMatrix::from_row_slice(p, p, &s[p * p..]),
    })
}

/// Cross-batch blocks from the stored last observation of the previous batch
/// and the first observation of the next.
pub fn cross_batch_blocks(
    prev_last: &Observation,
    next_first: &Observation,
    beta: &[f64],
    family: Family,
) -> Result<CrossBlocks> {
    let p = beta.len();
    for obs in [prev_last, next_first] {
        if obs.x.len() != p {
            return Err(Error::Dimension {
                context: "observation covariates",
                expected: p,
                actual: obs.x.len(),
            });
        }
        if !obs.y.is_finite() || obs.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("cross-batch observation must be finite".into()));
        }
    }
    check_beta(p, beta)?;
    let mut g_l = Vec::with_capacity(p);
    let mut g_f = Vec::with_capacity(p);
    let e_l = standardize_obs(prev_last, beta, family, &mut g_l)?;
    let e_f = standardize_obs(next_first, beta, family, &mut g_f)?;
    let gl = DVector::from_vec(g_l);
    let gf = DVector::from_vec(g_f);
    let s_fwd = &gl * gf.transpose();
    let s_bwd = s_fwd.transpose();
    Ok(CrossBlocks {
        u_fwd: &gl * e_f,
        u_bwd: &gf * e_l,
        s_fwd,
        s_bwd,
    })
}

/// Stacks the `M1` block above the `M2` block.
pub fn stack_extended(u1: &DVector<f64>, u2: &DVector<f64>) -> Result<DVector<f64>> {
    if u1.len() != u2.len() {
        return Err(Error::Dimension {
            context: "stack_extended",
            expected: u1.len(),
            actual: u2.len(),
        });
    }
    let p = u1.len();
    Ok(DVector::from_fn(2 * p, |r, _| if r < p { u1[r] } else { u2[r - p] }))
}

pub fn stack_gradient(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s1.shape() != s2.shape() {
        return Err(Error::Dimension {
            context: "stack_gradient",
            expected: s1.nrows() * s1.ncols(),
            actual: s2.nrows() * s2.ncols(),
        });
    }
    let (p, c) = s1.shape();
    Ok(DMatrix::from_fn(2 * p, c, |r, k| if r < p { s1[(r, k)] } else { s2[(r - p, k)] }))
}

pub fn split_extended(u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if u.len() % 2 != 0 {
        return Err(Error::Dimension {
            context: "split_extended",
            expected: u.len() + 1,
            actual: u.len(),
        });
    }
    let p = u.len() / 2;
    Ok((u.rows(0, p).into_owned(), u.rows(p, p).into_owned()))
}

/// Adds the within-batch blocks into `u` (length `pS`) and `s` (row-major
/// `pS x p`).
fn accumulate_within(scratch: &Scratch, n: usize, p: usize, basis: BasisSet, u: &mut [f64], s: &mut [f64]) {
    let g = &scratch.g;
    let e = &scratch.e;
    let pp = p * p;
    for k in 0..n {
        let gk = &g[k * p..(k + 1) * p];
        for (r, &gr) in gk.iter().enumerate() {
            u[r] += gr * e[k];
            let srow = &mut s[r * p..(r + 1) * p];
            for (c, slot) in srow.iter_mut().enumerate() {
                *slot += gr * gk[c];
            }
        }
        if basis == BasisSet::Independence {
            continue;
        }
        // neighbour sums for M2
        let mut e_nb = 0.0;
        if k > 0 {
            e_nb += e[k - 1];
        }
        if k + 1 < n {
            e_nb += e[k + 1];
        }
        for (r, &gr) in gk.iter().enumerate() {
            u[p + r] += gr * e_nb;
            let srow = &mut s[pp + r * p..pp + (r + 1) * p];
            for (c, slot) in srow.iter_mut().enumerate() {
                let mut nb = 0.0;
                if k > 0 {
                    nb += g[(k - 1) * p + c];
                }
                if k + 1 < n {
                    nb += g[(k + 1) * p + c];
                }
                *slot += gr * nb;
            }
        }
    }
}

/// Current-batch contribution to a subject's extended score and gradient:
/// `stack(U1, U2 + U_fwd + w_bwd * U_bwd)` and the matching `S` stack.
///
/// `u` and `s` are overwritten. Cross terms are skipped when `prev_last` is
/// `None` or the basis is independence.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_contribution(
    scratch: &mut Scratch,
    batch: &Batch,
    prev_last: Option<&Observation>,
    beta: &[f64],
    family: Family,
    basis: BasisSet,
    w_bwd: f64,
    u: &mut [f64],
    s: &mut [f64],
) -> Result<()> {
    let (n, p) = (batch.n(), batch.p());
    u.iter_mut().for_each(|v| *v = 0.0);
    s.iter_mut().for_each(|v| *v = 0.0);
    scratch.standardize(batch, beta, family)?;
    accumulate_within(scratch, n, p, basis, u, s);
    if basis == BasisSet::Independence {
        return Ok(());
    }
    let Some(last) = prev_last else {
        return Ok(());
    };
    let mut g_l = std::mem::take(&mut scratch.g_last);
    let e_l = standardize_obs(last, beta, family, &mut g_l)?;
    let e_f = scratch.e[0];
    let mut g_f = std::mem::take(&mut scratch.g_first);
    g_f.clear();
    g_f.extend_from_slice(&scratch.g[..p]);
    let pp = p * p;
    for r in 0..p {
        u[p + r] += g_l[r] * e_f + w_bwd * g_f[r] * e_l;
        for c in 0..p {
            s[pp + r * p + c] += g_l[r] * g_f[c] + w_bwd * g_f[r] * g_l[c];
        }
    }
    scratch.g_last = g_l;
    scratch.g_first = g_f;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, p: usize, family: Family) -> Batch {
        let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.5..1.5) });
        let y = DVector::from_fn(n, |_, _| match family {
            Family::GaussianIdentity => rng.random_range(-2.0..2.0),
            Family::BernoulliLogit => f64::from(rng.random_bool(0.5) as u8),
            Family::PoissonLog => f64::from(rng.random_range(0u32..5)),
        });
        Batch::new("s", 1, 1.0, x, y).unwrap()
    }

    fn dense_m2(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |r, c| if r.abs_diff(c) == 1 { 1.0 } else { 0.0 })
    }

    #[test]
    fn basis_counts() {
        assert_eq!(BasisSet::from_count(1).unwrap(), BasisSet::Independence);
        assert_eq!(BasisSet::from_count(2).unwrap().s_count(), 2);
        assert!(BasisSet::from_count(3).is_err());
    }

    #[test]
    fn least_squares_root_zeroes_u1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_batch(&mut rng, 8, 3, Family::GaussianIdentity);
        let xtx = b.x.transpose() * &b.x;
        let xty = b.x.transpose() * &b.y;
        let beta = xtx.cholesky().unwrap().solve(&xty);
        let wb = within_batch_blocks(&b, beta.as_slice(), Family::GaussianIdentity).unwrap();
        assert!(wb.u1.amax() < 1e-12);
    }

    #[test]
    fn single_row_batch_has_empty_m2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_batch(&mut rng, 1, 3, Family::PoissonLog);
        let wb = within_batch_blocks(&b, &[0.1, 0.2, -0.3], Family::PoissonLog).unwrap();
        assert_eq!(wb.u2, DVector::zeros(3));
        assert_eq!(wb.s2, DMatrix::zeros(3, 3));
    }

    #[test]
    fn stencil_matches_dense_m2() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for family in [Family::GaussianIdentity, Family::BernoulliLogit, Family::PoissonLog] {
            let b = random_batch(&mut rng, 5, 3, family);
            let beta = [0.3, -0.2, 0.5];
            let wb = within_batch_blocks(&b, &beta, family).unwrap();
            let md = crate::model::mean_deriv(&b, &beta, family).unwrap();
            let a_inv_half = DMatrix::from_diagonal(&md.a_diag.map(|a| 1.0 / a.sqrt()));
            let r = &b.y - &md.mu;
            let core = md.d.transpose() * &a_inv_half * dense_m2(5) * &a_inv_half;
            let u2 = &core * r;
            let s2 = &core * &md.d;
            assert!((&u2 - &wb.u2).norm() <= 1e-12 * u2.norm().max(1.0));
            assert!((&s2 - &wb.s2).norm() <= 1e-12 * s2.norm().max(1.0));
        }
    }

    #[test]
    fn cross_blocks_examples() {
        let fam = Family::GaussianIdentity;
        let last = Observation { x: vec![1.0, 0.0], y: 0.7 };
        let first = Observation { x: vec![1.0, 0.0], y: 2.5 };
        let beta = [0.5, 3.0];
        let cb = cross_batch_blocks(&last, &first, &beta, fam).unwrap();
        assert_eq!(cb.u_fwd, DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(cb.s_bwd, cb.s_fwd.transpose());

        let on_mean = Observation { x: vec![1.0, 0.0], y: 0.5 };
        let cb = cross_batch_blocks(&last, &on_mean, &beta, fam).unwrap();
        assert_eq!(cb.u_fwd, DVector::zeros(2));
    }

    #[test]
    fn two_batch_assembly_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for family in [Family::GaussianIdentity, Family::BernoulliLogit, Family::PoissonLog] {
            let b1 = random_batch(&mut rng, 2, 2, family);
            let b2 = random_batch(&mut rng, 2, 2, family);
            let beta = [0.2, -0.6];
            let w1 = within_batch_blocks(&b1, &beta, family).unwrap();
            let w2 = within_batch_blocks(&b2, &beta, family).unwrap();
            let cb = cross_batch_blocks(&b1.last_obs(), &b2.first_obs(), &beta, family).unwrap();
            let blockwise = &w1.u2 + &w2.u2 + &cb.u_fwd + &cb.u_bwd;

            let x = DMatrix::from_fn(4, 2, |r, c| if r < 2 { b1.x[(r, c)] } else { b2.x[(r - 2, c)] });
            let y = DVector::from_fn(4, |r, _| if r < 2 { b1.y[r] } else { b2.y[r - 2] });
            let all = Batch::new("s", 1, 1.0, x, y).unwrap();
            let md = crate::model::mean_deriv(&all, &beta, family).unwrap();
            let m2 = DMatrix::from_row_slice(
                4,
                4,
                &[0., 1., 0., 0., 1., 0., 1., 0., 0., 1., 0., 1., 0., 0., 1., 0.],
            );
            let a = DMatrix::from_diagonal(&md.a_diag.map(|a| 1.0 / a.sqrt()));
            let dense = md.d.transpose() * &a * m2 * &a * (&all.y - &md.mu);
            assert!((&dense - &blockwise).norm() <= 1e-12 * dense.norm().max(1.0), "{family:?}");
        }
    }

    #[test]
    fn stacking_order() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let b = DVector::from_vec(vec![3.0, 4.0]);
        let s = stack_extended(&a, &b).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(split_extended(&s).unwrap(), (a.clone(), b));
        let z = DVector::zeros(2);
        assert_eq!(stack_extended(&z, &z).unwrap(), DVector::zeros(4));
        assert!(stack_extended(&a, &DVector::zeros(3)).is_err());
        let m = stack_gradient(&DMatrix::identity(2, 2), &DMatrix::from_element(2, 2, 5.0)).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(3, 1)], 5.0);
    }

    #[test]
    fn contribution_kernel_matches_public_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let family = Family::BernoulliLogit;
        let prev = random_batch(&mut rng, 4, 3, family);
        let b = random_batch(&mut rng, 6, 3, family);
        let beta = [0.1, 0.4, -0.2];
        let w = 0.37;
        let mut scratch = Scratch::default();
        let mut u = vec![0.0; 6];
        let mut s = vec![0.0; 18];
        let last = prev.last_obs();
        batch_contribution(&mut scratch, &b, Some(&last), &beta, family, BasisSet::Ar1, w, &mut u, &mut s).unwrap();
        let wb = within_batch_blocks(&b, &beta, family).unwrap();
        let cb = cross_batch_blocks(&last, &b.first_obs(), &beta, family).unwrap();
        let u_ref = stack_extended(&wb.u1, &(&wb.u2 + &cb.u_fwd + &cb.u_bwd * w)).unwrap();
        let s_ref = stack_gradient(&wb.s1, &(&wb.s2 + &cb.s_fwd + &cb.s_bwd * w)).unwrap();
        for r in 0..6 {
            assert!((u[r] - u_ref[r]).abs() < 1e-13);
            for c in 0..3 {
                assert!((s[r * 3 + c] - s_ref[(r, c)]).abs() < 1e-13);
            }
        }
    }
}
