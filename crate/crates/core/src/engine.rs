//! Streaming estimation from per-subject summary statistics.
//!
//! Each subject carries `(U~_i, S~_i)` frozen at the previous estimate plus
//! the last observation of the previous batch. When a new batch arrives the
//! carried score is extended linearly in beta, discounted by `q^{dt}`, and
//! combined with the new batch's blocks and the two rank-one cross-batch
//! terms. The incremental equation `S~^T V~^{-1} U~ = 0` is then solved by
//! Gauss-Newton with `U~`, `S~` and `V~` rebuilt at every iterate.
//!
//! In adaptive mode every candidate decay value keeps its own summaries from
//! batch 1 onward; the candidate whose current-batch quadratic form is
//! smallest supplies the reported estimate.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blocks::{batch_contribution, BasisSet, Scratch};
use crate::codec;
use crate::error::{Error, Result};
use crate::inference::{confidence_intervals, covariance_from, FitReport};
use crate::model::{Batch, Family, Observation};
use crate::offline::{offline_fit, CumulativeData};
use crate::solver::{factor_psd, gauss_newton, quadratic_form, Aggregates, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Number of coefficients.
    pub p: usize,
    pub basis: BasisSet,
}

impl ModelSpec {
    /// Extended score dimension `pS`.
    pub fn dim(&self) -> usize {
        self.p * self.basis.s_count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMode {
    Fixed(#[serde(with = "codec")] f64),
    Adaptive(#[serde(with = "codec::vec")] Vec<f64>),
}

impl QMode {
    fn candidates(&self) -> Vec<f64> {
        match self {
            QMode::Fixed(q) => vec![*q],
            QMode::Adaptive(c) => c.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.candidates();
        if c.is_empty() {
            return Err(Error::Validation("candidate set for q is empty".into()));
        }
        for q in c {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::Validation(format!("q must lie in (0, 1), got {q}")));
            }
        }
        Ok(())
    }
}

/// Candidate set `q = exp(-a * b^0.3)` over `count` evenly spaced `a` in
/// `[a_min, a_max]`, for a stream of `horizon` batches.
pub fn q_grid(horizon: usize, a_min: f64, a_max: f64, count: usize) -> Result<Vec<f64>> {
    if count == 0 || horizon == 0 {
        return Err(Error::Validation("q grid needs a positive horizon and count".into()));
    }
    if !(a_min > 0.0 && a_max >= a_min) {
        return Err(Error::Validation(format!("invalid q grid range [{a_min}, {a_max}]")));
    }
    let scale = (horizon as f64).powf(0.3);
    Ok((0..count)
        .map(|k| {
            let a = if count == 1 {
                a_min
            } else {
                a_min + (a_max - a_min) * k as f64 / (count - 1) as f64
            };
            (-a * scale).exp()
        })
        .collect())
}

/// The default candidate set: 20 values of `a` in `[0.1, 1]`.
pub fn default_q_grid(horizon: usize) -> Vec<f64> {
    q_grid(horizon, 0.1, 1.0, 20).expect("valid default grid")
}

/// Carried per-subject state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    /// `U~_{i,b}`, length `pS`.
    #[serde(with = "codec::vec")]
    pub u_tilde: Vec<f64>,
    /// `S~_{i,b}`, row-major `pS x p`.
    #[serde(with = "codec::vec")]
    pub s_tilde: Vec<f64>,
    pub last_obs: StoredObservation,
}

/// Bit-exact persisted copy of an [`Observation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredObservation {
    #[serde(with = "codec::vec")]
    pub x: Vec<f64>,
    #[serde(with = "codec")]
    pub y: f64,
}

impl From<Observation> for StoredObservation {
    fn from(o: Observation) -> Self {
        StoredObservation { x: o.x, y: o.y }
    }
}

impl StoredObservation {
    pub fn to_observation(&self) -> Observation {
        Observation {
            x: self.x.clone(),
            y: self.y,
        }
    }
}

/// Summaries and estimate carried for one decay value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    #[serde(with = "codec")]
    pub q: f64,
    #[serde(with = "codec::vec")]
    pub beta: Vec<f64>,
    pub subjects: Vec<SubjectSummary>,
    #[serde(with = "codec::count")]
    pub iterations: usize,
    /// Current-batch quadratic form used for selection.
    #[serde(with = "codec::opt")]
    pub criterion: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(with = "codec::count")]
    pub ridge_events: usize,
    #[serde(with = "codec::count")]
    pub h_not_pd: usize,
    pub dropped_candidates: Vec<String>,
    #[serde(with = "codec::count")]
    pub last_iterations: usize,
}

/// Outcome of one update, for logging and trace output.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSummary {
    pub q_used: f64,
    pub iterations: usize,
    /// `(q, criterion)` for every candidate that survived.
    pub criteria: Vec<(f64, f64)>,
}

/// Full streaming state. Size is `O(|C_q| m p^2)` and does not grow with the
/// number of batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEngine {
    pub model: ModelSpec,
    pub config: SolverConfig,
    pub q_mode: QMode,
    pub subject_ids: Vec<String>,
    #[serde(with = "codec")]
    pub t_prev: f64,
    #[serde(with = "codec::count")]
    pub batch_count: usize,
    /// Observations absorbed per subject so far (the longest series).
    #[serde(with = "codec::count")]
    pub n_total: usize,
    pub tracks: Vec<Track>,
    #[serde(with = "codec::count")]
    pub winner: usize,
    #[serde(with = "codec::opt")]
    pub q_used: Option<f64>,
    pub diagnostics: Diagnostics,
}

/// Orders incoming batches by the engine's subject order.
fn align<'a>(ids: &[String], batches: &'a [Batch]) -> Result<Vec<&'a Batch>> {
    if batches.len() != ids.len() {
        let missing: Vec<&str> = ids
            .iter()
            .filter(|id| !batches.iter().any(|b| &b.subject_id == *id))
            .map(String::as_str)
            .take(5)
            .collect();
        return Err(Error::Validation(format!(
            "expected {} subjects, got {} (missing: {:?})",
            ids.len(),
            batches.len(),
            missing
        )));
    }
    if batches.iter().zip(ids).all(|(b, id)| &b.subject_id == id) {
        return Ok(batches.iter().collect());
    }
    let mut out: Vec<Option<&Batch>> = vec![None; ids.len()];
    for b in batches {
        let i = ids
            .binary_search(&b.subject_id)
            .map_err(|_| Error::Validation(format!("unknown subject '{}'", b.subject_id)))?;
        if out[i].replace(b).is_some() {
            return Err(Error::Validation(format!("duplicate subject '{}'", b.subject_id)));
        }
    }
    out.into_iter()
        .zip(ids)
        .map(|(b, id)| b.ok_or_else(|| Error::Validation(format!("subject '{id}' missing from batch"))))
        .collect()
}

fn check_batches(model: &ModelSpec, batches: &[&Batch], t: f64) -> Result<()> {
    for b in batches {
        if b.p() != model.p {
            return Err(Error::Dimension {
                context: "covariate count",
                expected: model.p,
                actual: b.p(),
            });
        }
        if b.t != t {
            return Err(Error::Validation(format!(
                "subject {} batch time {} does not match update time {t}",
                b.subject_id, b.t
            )));
        }
        b.validate(model.family)?;
    }
    Ok(())
}

/// Row-major `rows x cols` matrix times a vector, subtracted from `out`.
#[inline]
fn sub_matvec(out: &mut [f64], mat: &[f64], v: &[f64]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &mat[r * cols..(r + 1) * cols];
        *o -= row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

struct TrackResult {
    track: Track,
    ridge_events: usize,
    h_not_pd: bool,
}

impl StreamEngine {
    /// Initializes from the first batch via the dense offline estimator on
    /// batch 1 alone.
    pub fn init(first: &[Batch], t1: f64, model: ModelSpec, q_mode: QMode, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        q_mode.validate()?;
        if first.is_empty() {
            return Err(Error::Validation("at least one subject is required".into()));
        }
        let mut ordered: Vec<&Batch> = first.iter().collect();
        ordered.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let subject_ids: Vec<String> = ordered.iter().map(|b| b.subject_id.clone()).collect();
        if subject_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("duplicate subject in first batch".into()));
        }
        check_batches(&model, &ordered, t1)?;

        let data = CumulativeData::from_batches(&[ordered.iter().map(|b| (*b).clone()).collect()])?;
        let fit = offline_fit(&data, 1.0, model.family, model.basis, &config)?;

        let d = model.dim();
        let p = model.p;
        let mut scratch = Scratch::default();
        let mut subjects = Vec::with_capacity(ordered.len());
        for b in &ordered {
            let mut u = vec![0.0; d];
            let mut s = vec![0.0; d * p];
            batch_contribution(&mut scratch, b, None, &fit.beta, model.family, model.basis, 0.0, &mut u, &mut s)?;
            subjects.push(SubjectSummary {
                u_tilde: u,
                s_tilde: s,
                last_obs: b.last_obs().into(),
            });
        }
        let tracks = q_mode
            .candidates()
            .into_iter()
            .map(|q| Track {
                q,
                beta: fit.beta.clone(),
                subjects: subjects.clone(),
                iterations: fit.iterations,
                criterion: None,
            })
            .collect();
        let n_total = ordered.iter().map(|b| b.n()).max().unwrap_or(0);
        Ok(StreamEngine {
            model,
            config,
            q_mode,
            subject_ids,
            t_prev: t1,
            batch_count: 1,
            n_total,
            tracks,
            winner: 0,
            q_used: None,
            diagnostics: Diagnostics {
                ridge_events: fit.ridge_events,
                last_iterations: fit.iterations,
                ..Diagnostics::default()
            },
        })
    }

    pub fn beta(&self) -> &[f64] {
        &self.tracks[self.winner].beta
    }

    pub fn active_track(&self) -> &Track {
        &self.tracks[self.winner]
    }

    /// Absorbs one batch per subject at time `t_b`.
    pub fn update(&mut self, batches: &[Batch], t_b: f64) -> Result<UpdateSummary> {
        if !(t_b > self.t_prev) {
            return Err(Error::Validation(format!(
                "update time {t_b} must exceed previous time {}",
                self.t_prev
            )));
        }
        let ordered = align(&self.subject_ids, batches)?;
        check_batches(&self.model, &ordered, t_b)?;
        let dt = t_b - self.t_prev;
        let n_new = self.n_total + ordered.iter().map(|b| b.n()).max().unwrap_or(0);

        let mut results: Vec<(usize, TrackResult)> = Vec::with_capacity(self.tracks.len());
        let mut first_err = None;
        for (k, track) in self.tracks.iter().enumerate() {
            match update_track(track, &ordered, dt, &self.model, &self.config, n_new) {
                Ok(r) => results.push((k, r)),
                Err(e) => {
                    if matches!(self.q_mode, QMode::Fixed(_)) {
                        return Err(e);
                    }
                    warn!("dropping candidate q = {}: {e}", track.q);
                    self.diagnostics.dropped_candidates.push(format!("q={} at batch {}: {e}", track.q, self.batch_count + 1));
                    first_err.get_or_insert(e);
                }
            }
        }
        if results.is_empty() {
            return Err(first_err.unwrap_or_else(|| Error::Validation("no candidate tracks".into())));
        }
        let criteria: Vec<Option<f64>> = results.iter().map(|(_, r)| r.track.criterion).collect();
        let win = select_winner(&criteria).unwrap_or(0);

        for (_, r) in &results {
            self.diagnostics.ridge_events += r.ridge_events;
            self.diagnostics.h_not_pd += usize::from(r.h_not_pd);
        }
        let summary = UpdateSummary {
            q_used: results[win].1.track.q,
            iterations: results[win].1.track.iterations,
            criteria: results
                .iter()
                .filter_map(|(_, r)| r.track.criterion.map(|c| (r.track.q, c)))
                .collect(),
        };
        self.tracks = results.into_iter().map(|(_, r)| r.track).collect();
        self.winner = win;
        self.q_used = Some(summary.q_used);
        self.t_prev = t_b;
        self.batch_count += 1;
        self.n_total = n_new;
        self.diagnostics.last_iterations = summary.iterations;
        Ok(summary)
    }

    /// Frozen `(U~_b, S~_b, V~_b)` of the reported track.
    pub fn aggregates(&self) -> Aggregates {
        track_aggregates(self.active_track(), &self.model)
    }

    /// `{S~_b^T V~_b^{-1} S~_b}^{-1}` for the reported track.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let agg = self.aggregates();
        Ok(covariance_from(&agg.s, &agg.v, self.config.ridge_eps)?.0)
    }

    pub fn report(&self, level: f64) -> Result<FitReport> {
        let cov = self.covariance()?;
        confidence_intervals(
            &DVector::from_column_slice(self.beta()),
            &cov,
            level,
            self.batch_count,
            self.t_prev,
            self.q_used,
            self.active_track().iterations,
        )
    }
}

/// Index of the smallest criterion; ties keep the earlier candidate.
pub fn select_winner(criteria: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in criteria.iter().enumerate() {
        if let Some(v) = *c {
            if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
                best = Some((k, v));
            }
        }
    }
    best.map(|(k, _)| k)
}

fn track_aggregates(track: &Track, model: &ModelSpec) -> Aggregates {
    let (d, p) = (model.dim(), model.p);
    let mut agg = Aggregates::zeros(d, p);
    for s in &track.subjects {
        let u = DVector::from_column_slice(&s.u_tilde);
        agg.u += &u;
        agg.s += DMatrix::from_row_slice(d, p, &s.s_tilde);
        agg.v += &u * u.transpose();
    }
    agg
}

fn update_track(
    track: &Track,
    batches: &[&Batch],
    dt: f64,
    model: &ModelSpec,
    config: &SolverConfig,
    n_new: usize,
) -> Result<TrackResult> {
    let (d, p) = (model.dim(), model.p);
    let m = batches.len();
    let w = track.q.powf(dt);

    // carried pieces: q^dt (U~ + S~ beta_prev) and q^dt S~
    let mut base_u = vec![0.0; m * d];
    let mut carried_s = vec![0.0; m * d * p];
    for (i, sub) in track.subjects.iter().enumerate() {
        let bu = &mut base_u[i * d..(i + 1) * d];
        let cs = &mut carried_s[i * d * p..(i + 1) * d * p];
        for r in 0..d {
            let srow = &sub.s_tilde[r * p..(r + 1) * p];
            let sb: f64 = srow.iter().zip(&track.beta).map(|(a, b)| a * b).sum();
            bu[r] = w * (sub.u_tilde[r] + sb);
            for c in 0..p {
                cs[r * p + c] = w * srow[c];
            }
        }
    }
    let last_obs: Vec<Observation> = track.subjects.iter().map(|s| s.last_obs.to_observation()).collect();

    let mut contrib_u = vec![0.0; m * d];
    let mut contrib_s = vec![0.0; m * d * p];
    let mut tilde_u = vec![0.0; m * d];
    let mut scratch = Scratch::default();

    let outcome = gauss_newton(&track.beta, config, |beta| {
        let mut agg = Aggregates::zeros(d, p);
        for i in 0..m {
            let cu = &mut contrib_u[i * d..(i + 1) * d];
            let cs = &mut contrib_s[i * d * p..(i + 1) * d * p];
            batch_contribution(
                &mut scratch,
                batches[i],
                Some(&last_obs[i]),
                beta,
                model.family,
                model.basis,
                w,
                cu,
                cs,
            )?;
            let tu = &mut tilde_u[i * d..(i + 1) * d];
            tu.copy_from_slice(&base_u[i * d..(i + 1) * d]);
            sub_matvec(tu, &carried_s[i * d * p..(i + 1) * d * p], beta);
            for r in 0..d {
                tu[r] += cu[r];
                agg.u[r] += tu[r];
                for c in 0..p {
                    agg.s[(r, c)] += carried_s[i * d * p + r * p + c] + cs[r * p + c];
                }
            }
            for c in 0..d {
                for r in c..d {
                    agg.v[(r, c)] += tu[r] * tu[c];
                }
            }
        }
        for c in 0..d {
            for r in (c + 1)..d {
                agg.v[(c, r)] = agg.v[(r, c)];
            }
        }
        Ok(agg)
    })?;

    // closure state now holds the blocks at the converged estimate
    let subjects: Vec<SubjectSummary> = (0..m)
        .map(|i| SubjectSummary {
            u_tilde: tilde_u[i * d..(i + 1) * d].to_vec(),
            s_tilde: (0..d * p)
                .map(|k| carried_s[i * d * p + k] + contrib_s[i * d * p + k])
                .collect(),
            last_obs: batches[i].last_obs().into(),
        })
        .collect();

    let mut ridge_events = outcome.ridge_events;
    let criterion = {
        let mut u_b = DVector::zeros(d);
        let mut v_b = DMatrix::zeros(d, d);
        for i in 0..m {
            let cu = DVector::from_column_slice(&contrib_u[i * d..(i + 1) * d]);
            u_b += &cu;
            v_b += &cu * cu.transpose();
        }
        let (value, ridged) = quadratic_form(&u_b, &v_b, config.ridge_eps)?;
        ridge_events += usize::from(ridged);
        value
    };

    let new_track = Track {
        q: track.q,
        beta: outcome.beta,
        subjects,
        iterations: outcome.iterations,
        criterion: Some(criterion),
    };

    let h_not_pd = if config.check_h_pd {
        let prev = track_aggregates(track, model);
        let cur = track_aggregates(&new_track, model);
        let (ch, _) = factor_psd(&cur.v, config.ridge_eps)?;
        let h = cur.s.transpose() * ch.solve(&prev.s) / n_new as f64;
        let sym = (&h + h.transpose()) * 0.5;
        let bad = sym.symmetric_eigen().eigenvalues.min() <= 0.0;
        if bad {
            warn!("H_b is not positive definite for q = {}", track.q);
        }
        bad
    } else {
        false
    };

    Ok(TrackResult {
        track: new_track,
        ridge_events,
        h_not_pd,
    })
}

/// Runs a whole stream `by_time[j][i]` and returns one report per batch.
pub fn fit_stream(
    by_time: &[Vec<Batch>],
    model: ModelSpec,
    q_mode: QMode,
    config: &SolverConfig,
    level: f64,
) -> Result<Vec<FitReport>> {
    let (first, rest) = by_time
        .split_first()
        .ok_or_else(|| Error::Validation("empty stream".into()))?;
    let t1 = first
        .first()
        .map(|b| b.t)
        .ok_or_else(|| Error::Validation("first batch has no subjects".into()))?;
    let mut engine = StreamEngine::init(first, t1, model, q_mode, *config)?;
    let mut reports = Vec::with_capacity(by_time.len());
    reports.push(engine.report(level)?);
    for group in rest {
        let t = group
            .first()
            .map(|b| b.t)
            .ok_or_else(|| Error::Validation("batch has no subjects".into()))?;
        engine.update(group, t)?;
        reports.push(engine.report(level)?);
    }
    Ok(reports)
}
