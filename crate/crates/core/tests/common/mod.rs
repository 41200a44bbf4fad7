#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use stream_qif::model::link_inverse;
use stream_qif::offline::{blockwise_subject_scores, CumulativeData};
use stream_qif::{Batch, BasisSet, Family};

pub const FAMILIES: [Family; 3] = [Family::GaussianIdentity, Family::BernoulliLogit, Family::PoissonLog];

/// Intercept plus uniform covariates; outcomes drawn from the family with
/// a modest effect so that nothing saturates.
pub fn random_stream(rng: &mut ChaCha8Rng, family: Family, m: usize, b: usize, n: usize, p: usize) -> Vec<Vec<Batch>> {
    let beta: Vec<f64> = (0..p).map(|k| 0.3 - 0.2 * k as f64).collect();
    (1..=b)
        .map(|j| {
            (0..m)
                .map(|i| {
                    let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
                    let y = DVector::from_fn(n, |r, _| {
                        let eta: f64 = (0..p).map(|c| x[(r, c)] * beta[c]).sum();
                        let mu = link_inverse(eta, family);
                        match family {
                            Family::GaussianIdentity => mu + rng.random_range(-1.0..1.0),
                            Family::BernoulliLogit => f64::from(u8::from(rng.random_bool(mu))),
                            Family::PoissonLog => {
                                // inversion sampling, mu is small here
                                let u: f64 = rng.random();
                                let (mut k, mut pmf) = (0.0, (-mu).exp());
                                let mut cdf = pmf;
                                while cdf < u && k < 200.0 {
                                    k += 1.0;
                                    pmf *= mu / k;
                                    cdf += pmf;
                                }
                                k
                            }
                        }
                    });
                    Batch::new(format!("s{i:03}"), j, j as f64, x, y).unwrap()
                })
                .collect()
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Max relative error between the summed stacked `S` and a central
/// finite-difference `-dU/dbeta` of the summed stacked `U`.
pub fn gradient_check(data: &CumulativeData, beta: &[f64], q: f64, family: Family, basis: BasisSet) -> f64 {
    let total = |b: &[f64]| {
        let per = blockwise_subject_scores(data, b, q, family, basis).unwrap();
        let d = per[0].0.len();
        let p = b.len();
        per.iter()
            .fold((DVector::zeros(d), DMatrix::zeros(d, p)), |(u, s), (ui, si)| (u + ui, s + si))
    };
    let (_, s) = total(beta);
    let p = beta.len();
    let mut fd = DMatrix::zeros(s.nrows(), p);
    for k in 0..p {
        let h = 1e-6 * beta[k].abs().max(1.0);
        let mut up = beta.to_vec();
        let mut dn = beta.to_vec();
        up[k] += h;
        dn[k] -= h;
        let col = (total(&dn).0 - total(&up).0) / (2.0 * h);
        fd.set_column(k, &col);
    }
    max_rel_err(s.as_slice(), fd.as_slice())
}
