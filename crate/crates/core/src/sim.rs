//! Simulation designs, data generators and the Monte-Carlo replicate runner.
//!
//! Every generator draws one AR(1) latent series per subject across all
//! batches, so dependence crosses batch boundaries. Replicate `r` uses the
//! ChaCha stream `r` of the design seed, which makes each replicate
//! reproducible on its own and independent of execution order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::BasisSet;
use crate::engine::{fit_stream, q_grid, ModelSpec, QMode};
use crate::error::{Error, Result};
use crate::inference::{normal_cdf, FitReport};
use crate::model::{link_inverse, Batch, Family};
use crate::solver::SolverConfig;

/// Largest Poisson mean the copula generator accepts.
pub const POISSON_MU_MAX: f64 = 500.0;
/// Replicate failure fraction above which the harness gives up.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Time path of the true coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaPath {
    /// `(0.2, sin(2 pi j / b), 0.5)`
    LinearSine,
    /// `(0.2, 4 j (1 - j / b) / b, 0.5)`
    LogisticQuadratic,
    /// `(0.2, sin(2 pi j / b), 0.3)`
    PoissonSine,
    Constant(Vec<f64>),
}

impl BetaPath {
    pub fn at(&self, j: usize, b: usize) -> Vec<f64> {
        let (jf, bf) = (j as f64, b as f64);
        match self {
            BetaPath::LinearSine => vec![0.2, (2.0 * std::f64::consts::PI * jf / bf).sin(), 0.5],
            BetaPath::LogisticQuadratic => vec![0.2, 4.0 * jf * (1.0 - jf / bf) / bf, 0.5],
            BetaPath::PoissonSine => vec![0.2, (2.0 * std::f64::consts::PI * jf / bf).sin(), 0.3],
            BetaPath::Constant(v) => v.clone(),
        }
    }

    pub fn p(&self) -> usize {
        match self {
            BetaPath::Constant(v) => v.len(),
            _ => 3,
        }
    }
}

/// How the decay parameter is chosen in a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QSpec {
    Fixed(f64),
    /// `q = exp(-a b^0.3)` with `count` values of `a` evenly spaced in
    /// `[a_min, a_max]`.
    Grid { a_min: f64, a_max: f64, count: usize },
}

impl QSpec {
    pub fn to_mode(&self, horizon: usize) -> Result<QMode> {
        match self {
            QSpec::Fixed(q) => Ok(QMode::Fixed(*q)),
            QSpec::Grid { a_min, a_max, count } => Ok(QMode::Adaptive(q_grid(horizon, *a_min, *a_max, *count)?)),
        }
    }
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub family: Family,
    pub m: usize,
    pub b: usize,
    pub n_j: usize,
    pub beta_path: BetaPath,
    pub sigma2: f64,
    pub rho: f64,
    pub seed: u64,
    pub replicates: usize,
    pub q: QSpec,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl SimDesign {
    /// Linear AR(1) design with a sinusoidal covariate effect.
    pub fn linear(m: usize, b: usize, n_j: usize) -> Self {
        SimDesign {
            family: Family::GaussianIdentity,
            m,
            b,
            n_j,
            beta_path: BetaPath::LinearSine,
            sigma2: 4.0,
            rho: 0.8,
            seed: 20_240_601,
            replicates: 100,
            q: QSpec::Grid {
                a_min: 0.1,
                a_max: 1.0,
                count: 20,
            },
            level: 0.95,
            solver: SolverConfig::default(),
        }
    }

    /// Marginal logistic design with latent AR(1) thresholding.
    pub fn logistic(m: usize, b: usize, n_j: usize) -> Self {
        SimDesign {
            family: Family::BernoulliLogit,
            beta_path: BetaPath::LogisticQuadratic,
            ..SimDesign::linear(m, b, n_j)
        }
    }

    /// Poisson design with a Gaussian-copula AR(1) latent series.
    pub fn poisson(m: usize, b: usize, n_j: usize) -> Self {
        SimDesign {
            family: Family::PoissonLog,
            beta_path: BetaPath::PoissonSine,
            sigma2: 1.0,
            ..SimDesign::linear(m, b, n_j)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.b == 0 || self.n_j == 0 || self.replicates == 0 {
            return Err(Error::Validation("m, b, n_j and replicates must be positive".into()));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::Validation(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Validation(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.beta_path.p() != 3 {
            return Err(Error::Validation(
                "generators use an intercept and two covariates: beta path must have 3 entries".into(),
            ));
        }
        for j in 1..=self.b {
            if self.beta_path.at(j, self.b).iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("beta path must be finite".into()));
            }
        }
        self.q.to_mode(self.b)?.validate()?;
        self.solver.validate()
    }

    pub fn truth(&self) -> Vec<f64> {
        self.beta_path.at(self.b, self.b)
    }

    fn replicate_rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64);
        rng
    }
}

/// Coefficient labels used in simulation output.
pub fn coefficient_names(p: usize) -> Vec<String> {
    (0..p)
        .map(|k| if k == 0 { "intercept".to_string() } else { format!("x{k}") })
        .collect()
}

/// One simulated dataset, `by_time[j][i]`.
#[derive(Debug, Clone)]
pub struct SimData {
    pub by_time: Vec<Vec<Batch>>,
}

/// Fills `out` with a stationary AR(1) series of variance `sigma2`.
pub fn ar1_series<R: Rng>(rng: &mut R, sigma2: f64, rho: f64, out: &mut [f64]) {
    let sd = sigma2.sqrt();
    let innov = (sigma2 * (1.0 - rho * rho)).sqrt();
    let mut prev = 0.0;
    for (k, slot) in out.iter_mut().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        prev = if k == 0 { sd * z } else { rho * prev + innov * z };
        *slot = prev;
    }
}

/// Smallest `k` with `P(Y <= k) >= u` for `Y ~ Poisson(mu)`.
pub fn poisson_quantile(u: f64, mu: f64) -> f64 {
    let limit = (mu + 40.0 * mu.sqrt() + 100.0) as u64;
    let mut k = 0u64;
    let mut pmf = (-mu).exp();
    let mut cdf = pmf;
    while cdf < u && k < limit {
        k += 1;
        pmf *= mu / k as f64;
        cdf += pmf;
    }
    k as f64
}

/// Shared skeleton: covariates are an intercept plus two independent
/// standard normals; `outcome(rng, eta, latent)` maps each linear predictor
/// and AR(1) latent draw to a response.
fn generate_with<F>(design: &SimDesign, replicate: usize, mut outcome: F) -> Result<SimData>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    design.validate()?;
    let mut rng = design.replicate_rng(replicate);
    let (m, b, n) = (design.m, design.b, design.n_j);
    let total = b * n;
    let betas: Vec<Vec<f64>> = (1..=b).map(|j| design.beta_path.at(j, b)).collect();
    let mut by_time: Vec<Vec<Batch>> = (0..b).map(|_| Vec::with_capacity(m)).collect();
    let mut latent = vec![0.0; total];
    let width = (m.max(1) - 1).to_string().len().max(3);
    for i in 0..m {
        ar1_series(&mut rng, design.sigma2, design.rho, &mut latent);
        for (j, group) in by_time.iter_mut().enumerate() {
            let beta = &betas[j];
            let mut x = DMatrix::zeros(n, 3);
            let mut y = DVector::zeros(n);
            for k in 0..n {
                let x1: f64 = rng.sample(StandardNormal);
                let x2: f64 = rng.sample(StandardNormal);
                x[(k, 0)] = 1.0;
                x[(k, 1)] = x1;
                x[(k, 2)] = x2;
                let eta = beta[0] + beta[1] * x1 + beta[2] * x2;
                y[k] = outcome(eta, latent[j * n + k])?;
            }
            group.push(Batch::new(format!("s{i:0width$}"), j + 1, (j + 1) as f64, x, y)?);
        }
    }
    Ok(SimData { by_time })
}

fn require_family(design: &SimDesign, family: Family) -> Result<()> {
    if design.family != family {
        return Err(Error::Validation(format!(
            "generator for {} called with a {} design",
            family.name(),
            design.family.name()
        )));
    }
    Ok(())
}

/// Linear model with AR(1) Gaussian errors.
pub fn gen_linear(design: &SimDesign, replicate: usize) -> Result<SimData> {
    require_family(design, Family::GaussianIdentity)?;
    generate_with(design, replicate, |eta, e| Ok(eta + e))
}

/// Bernoulli outcomes by thresholding the latent AR(1) series at its
/// `1 - mu` marginal quantile, so `P(y = 1) = mu` exactly.
pub fn gen_logistic(design: &SimDesign, replicate: usize) -> Result<SimData> {
    require_family(design, Family::BernoulliLogit)?;
    let sd = design.sigma2.sqrt();
    generate_with(design, replicate, |eta, z| {
        let mu = link_inverse(eta, Family::BernoulliLogit);
        // z > sd * Phi^{-1}(1 - mu)  <=>  Phi(-z / sd) < mu
        Ok(if normal_cdf(-z / sd) < mu { 1.0 } else { 0.0 })
    })
}

/// Poisson outcomes through a Gaussian copula: latent AR(1) mapped through
/// `Phi` and then the Poisson quantile function.
pub fn gen_poisson(design: &SimDesign, replicate: usize) -> Result<SimData> {
    require_family(design, Family::PoissonLog)?;
    let sd = design.sigma2.sqrt();
    generate_with(design, replicate, |eta, z| {
        let mu = link_inverse(eta, Family::PoissonLog);
        if !(mu <= POISSON_MU_MAX) {
            return Err(Error::Domain(format!("Poisson mean {mu} exceeds {POISSON_MU_MAX}")));
        }
        Ok(poisson_quantile(normal_cdf(z / sd), mu))
    })
}

pub fn generate(design: &SimDesign, replicate: usize) -> Result<SimData> {
    match design.family {
        Family::GaussianIdentity => gen_linear(design, replicate),
        Family::BernoulliLogit => gen_logistic(design, replicate),
        Family::PoissonLog => gen_poisson(design, replicate),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub coefficient: String,
    pub rmse: f64,
    pub ese: f64,
    pub bias: f64,
    pub cp: f64,
    pub len: f64,
}

/// Aggregates final-batch reports against the truth. ESE uses the
/// population divisor so that `RMSE^2 = ESE^2 + BIAS^2` on the sample.
pub fn summarize(reports: &[FitReport], truth: &[f64]) -> Vec<MetricsRow> {
    let r = reports.len() as f64;
    let names = coefficient_names(truth.len());
    truth
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let est: Vec<f64> = reports.iter().map(|rep| rep.beta[k]).collect();
            let mean = est.iter().sum::<f64>() / r;
            let bias = mean - t;
            let mse = est.iter().map(|e| (e - t).powi(2)).sum::<f64>() / r;
            let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / r;
            let cp = reports.iter().filter(|rep| rep.covers(k, t)).count() as f64 / r;
            let len = reports.iter().map(|rep| rep.ci_length(k)).sum::<f64>() / r;
            MetricsRow {
                coefficient: names[k].clone(),
                rmse: mse.sqrt(),
                ese: var.sqrt(),
                bias,
                cp,
                len,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct HarnessResult {
    pub label: String,
    pub rows: Vec<MetricsRow>,
    pub completed: usize,
    pub failures: usize,
    /// Final-batch reports of the successful replicates.
    pub reports: Vec<FitReport>,
}

/// A named estimator applied to each simulated dataset.
pub type Fitter<'a> = (&'a str, Box<dyn Fn(&SimData) -> Result<FitReport> + Sync + 'a>);

/// Runs every fitter on the same replicate datasets.
pub fn run_replicates_with(design: &SimDesign, fitters: &[Fitter<'_>]) -> Result<Vec<HarnessResult>> {
    design.validate()?;
    let outcomes: Vec<Vec<Result<FitReport>>> = (0..design.replicates)
        .into_par_iter()
        .map(|r| match generate(design, r) {
            Ok(data) => fitters.iter().map(|(_, f)| f(&data)).collect(),
            Err(e) => fitters
                .iter()
                .map(|_| Err(Error::Harness(format!("replicate {r}: generation failed: {e}"))))
                .collect(),
        })
        .collect();
    let truth = design.truth();
    fitters
        .iter()
        .enumerate()
        .map(|(k, (label, _))| {
            let mut reports = Vec::with_capacity(design.replicates);
            let mut failures = 0;
            for (r, per) in outcomes.iter().enumerate() {
                match &per[k] {
                    Ok(rep) => reports.push(rep.clone()),
                    Err(e) => {
                        log::warn!("{label}: replicate {r} failed: {e}");
                        failures += 1;
                    }
                }
            }
            if failures as f64 > MAX_FAILURE_RATE * design.replicates as f64 {
                return Err(Error::Harness(format!(
                    "{label}: {failures} of {} replicates failed",
                    design.replicates
                )));
            }
            Ok(HarnessResult {
                label: label.to_string(),
                rows: summarize(&reports, &truth),
                completed: reports.len(),
                failures,
                reports,
            })
        })
        .collect()
}

/// Streaming fit of one simulated dataset; returns the last-batch report.
pub fn stream_fitter(design: &SimDesign, basis: BasisSet) -> impl Fn(&SimData) -> Result<FitReport> + Sync + '_ {
    move |data: &SimData| {
        let model = ModelSpec {
            family: design.family,
            p: 3,
            basis,
        };
        let q_mode = design.q.to_mode(design.b)?;
        let mut reports = fit_stream(&data.by_time, model, q_mode, &design.solver, design.level)?;
        Ok(reports.pop().expect("at least one batch"))
    }
}

/// Monte-Carlo metrics of the AR(1) streaming estimator.
pub fn run_replicates(design: &SimDesign) -> Result<HarnessResult> {
    let fitters: Vec<Fitter<'_>> = vec![("streaming", Box::new(stream_fitter(design, BasisSet::Ar1)))];
    Ok(run_replicates_with(design, &fitters)?.remove(0))
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub streaming: HarnessResult,
    pub independence: HarnessResult,
    /// Mean CI length of the independence estimator over the streaming one.
    pub length_ratio: Vec<f64>,
}

/// Streaming AR(1) estimator against the working-independence comparator on
/// identical data.
pub fn compare(design: &SimDesign) -> Result<Comparison> {
    let fitters: Vec<Fitter<'_>> = vec![
        ("streaming", Box::new(stream_fitter(design, BasisSet::Ar1))),
        ("independence", Box::new(stream_fitter(design, BasisSet::Independence))),
    ];
    let mut res = run_replicates_with(design, &fitters)?;
    let independence = res.pop().expect("two fitters");
    let streaming = res.pop().expect("two fitters");
    let length_ratio = streaming
        .rows
        .iter()
        .zip(&independence.rows)
        .map(|(s, i)| i.len / s.len)
        .collect();
    Ok(Comparison {
        streaming,
        independence,
        length_ratio,
    })
}
