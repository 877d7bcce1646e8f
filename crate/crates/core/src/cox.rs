//! Cox proportional hazards: Breslow-tie partial likelihood with optional
//! ridge penalty, Breslow baseline hazard and landmark-conditional survival.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::survfn::StepFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("no events in the data")]
    NoEvents,
    #[error("features, times and events disagree in length")]
    DimensionMismatch,
    #[error("non-finite feature value")]
    NonFinite,
    #[error("monotone likelihood: {0}")]
    MonotoneLikelihood(String),
    #[error("horizon {horizon} does not exceed landmark {landmark}")]
    InvalidHorizon { horizon: f64, landmark: f64 },
}

pub type Result<T> = std::result::Result<T, CoxError>;

/// Coefficients beyond this (standardized scale) signal divergence.
const DIVERGENCE_BOUND: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct CoxOptions {
    pub penalty: f64,
    /// Per-column penalty switch; `None` penalizes every column.
    pub penalized: Option<Vec<bool>>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            penalty: 0.0,
            penalized: None,
            max_iter: 100,
            tol: 1e-7,
        }
    }
}

impl CoxOptions {
    pub fn ridge(penalty: f64) -> Self {
        Self { penalty, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    /// Coefficients on the original feature scale.
    pub coefficients: Vec<f64>,
    /// Coefficients on the standardized scale, as penalized.
    pub std_coefficients: Vec<f64>,
    /// Cumulative Breslow baseline hazard for the centered linear predictor.
    pub baseline: StepFunction,
    pub feature_means: Vec<f64>,
    pub feature_sds: Vec<f64>,
    pub penalty: f64,
    /// Unpenalized partial log-likelihood at the estimate.
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_events: usize,
}

impl CoxFit {
    /// Centered linear predictor for one feature row.
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        row.iter()
            .zip(&self.feature_means)
            .zip(&self.coefficients)
            .map(|((x, m), b)| (x - m) * b)
            .sum()
    }

    /// `(event_time, increment)` pairs of the baseline hazard.
    pub fn baseline_increments(&self) -> Vec<(f64, f64)> {
        self.baseline.times.iter().copied().zip(self.baseline.increments()).collect()
    }

    pub fn coefficients_csv(&self, names: &[String]) -> String {
        let mut out = String::from("term,coefficient\n");
        for (j, b) in self.coefficients.iter().enumerate() {
            let name = names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
            out.push_str(&format!("{name},{b}\n"));
        }
        out
    }

    pub fn baseline_csv(&self) -> String {
        let mut out = String::from("time,cumulative_hazard\n");
        for (t, h) in self.baseline.times.iter().zip(&self.baseline.values) {
            out.push_str(&format!("{t},{h}\n"));
        }
        out
    }
}

/// Conditional survival predictions for a set of subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalPrediction {
    pub landmark: f64,
    pub horizons: Vec<f64>,
    /// `survival[i][h]` = Ŝ_i(horizons[h] | landmark).
    pub survival: Vec<Vec<f64>>,
    pub risk_scores: Vec<f64>,
    /// Some horizon lies beyond the last baseline jump.
    pub extrapolated: bool,
}

impl SurvivalPrediction {
    pub fn n(&self) -> usize {
        self.survival.len()
    }

    /// Rows of the given subjects, in order.
    pub fn select(&self, indices: &[usize]) -> SurvivalPrediction {
        SurvivalPrediction {
            landmark: self.landmark,
            horizons: self.horizons.clone(),
            survival: indices.iter().map(|&i| self.survival[i].clone()).collect(),
            risk_scores: indices.iter().map(|&i| self.risk_scores[i]).collect(),
            extrapolated: self.extrapolated,
        }
    }

    /// Survival column at one horizon.
    pub fn at_horizon(&self, h: usize) -> Vec<f64> {
        self.survival.iter().map(|r| r[h]).collect()
    }
}

pub(crate) fn check_horizons(landmark: f64, horizons: &[f64]) -> Result<()> {
    match horizons.iter().find(|&&h| !(h > landmark)) {
        Some(&horizon) => Err(CoxError::InvalidHorizon { horizon, landmark }),
        None => Ok(()),
    }
}

struct Derivs {
    loglik: f64,
    score: DVector<f64>,
    info: Option<DMatrix<f64>>,
}

/// Breslow partial log-likelihood, score and (optionally) observed
/// information at `beta`, for rows pre-sorted by decreasing time.
fn derivs(z: &DMatrix<f64>, times: &[f64], events: &[bool], order: &[usize], beta: &DVector<f64>, hessian: bool) -> Derivs {
    let p = z.ncols();
    let eta = z * beta;
    let shift = eta.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = if hessian { vec![0.0; p * p] } else { Vec::new() };
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = hessian.then(|| DMatrix::zeros(p, p));
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let start = k;
        while k < order.len() && times[order[k]] == t {
            let i = order[k];
            let w = (eta[i] - shift).exp();
            s0 += w;
            for a in 0..p {
                let za = z[(i, a)];
                s1[a] += w * za;
                if hessian {
                    for b in 0..=a {
                        s2[a * p + b] += w * za * z[(i, b)];
                    }
                }
            }
            k += 1;
        }
        let d = order[start..k].iter().filter(|&&i| events[i]).count() as f64;
        if d == 0.0 {
            continue;
        }
        let log_s0 = s0.ln() + shift;
        for &i in order[start..k].iter().filter(|&&i| events[i]) {
            loglik += eta[i] - log_s0;
            for a in 0..p {
                score[a] += z[(i, a)];
            }
        }
        for a in 0..p {
            score[a] -= d * s1[a] / s0;
        }
        if let Some(info) = info.as_mut() {
            for a in 0..p {
                for b in 0..=a {
                    let v = d * (s2[a * p + b] / s0 - s1[a] * s1[b] / (s0 * s0));
                    info[(a, b)] += v;
                    if a != b {
                        info[(b, a)] += v;
                    }
                }
            }
        }
    }
    Derivs { loglik, score, info }
}

fn decreasing_time_order(times: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    order
}

/// Unpenalized partial log-likelihood and its gradient at `beta`, on the
/// features as given.
pub fn partial_loglik(features: &DMatrix<f64>, times: &[f64], events: &[bool], beta: &[f64]) -> (f64, Vec<f64>) {
    let order = decreasing_time_order(times);
    let d = derivs(features, times, events, &order, &DVector::from_column_slice(beta), false);
    (d.loglik, d.score.iter().copied().collect())
}

fn validate(features: &DMatrix<f64>, times: &[f64], events: &[bool]) -> Result<()> {
    let n = features.nrows();
    if times.len() != n || events.len() != n {
        return Err(CoxError::DimensionMismatch);
    }
    if n < 2 {
        return Err(CoxError::TooFewSubjects(n));
    }
    if !events.iter().any(|&e| e) {
        return Err(CoxError::NoEvents);
    }
    if features.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(CoxError::NonFinite);
    }
    Ok(())
}

pub fn fit_cox(features: &DMatrix<f64>, times: &[f64], events: &[bool], penalty: f64) -> Result<CoxFit> {
    fit_cox_with(features, times, events, &CoxOptions::ridge(penalty), None)
}

/// Newton–Raphson with step-halving on the standardized features; `start`
/// is an optional warm start on the standardized scale.
pub fn fit_cox_with(
    features: &DMatrix<f64>,
    times: &[f64],
    events: &[bool],
    opts: &CoxOptions,
    start: Option<&[f64]>,
) -> Result<CoxFit> {
    validate(features, times, events)?;
    let (n, p) = features.shape();
    let means: Vec<f64> = (0..p).map(|j| features.column(j).mean()).collect();
    let sds: Vec<f64> = (0..p)
        .map(|j| {
            let m = means[j];
            (features.column(j).iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
        })
        .collect();
    let active: Vec<usize> = (0..p).filter(|&j| sds[j] > 1e-12 * (1.0 + means[j].abs())).collect();
    let pa = active.len();
    let z = DMatrix::from_fn(n, pa, |i, a| {
        let j = active[a];
        (features[(i, j)] - means[j]) / sds[j]
    });
    let ridge: Vec<f64> = active
        .iter()
        .map(|&j| {
            let on = opts.penalized.as_ref().map_or(true, |m| m.get(j).copied().unwrap_or(true));
            if on { opts.penalty } else { 0.0 }
        })
        .collect();
    let order = decreasing_time_order(times);

    let mut beta = DVector::from_iterator(pa, active.iter().map(|&j| start.and_then(|s| s.get(j).copied()).unwrap_or(0.0)));
    let objective = |d: &Derivs, b: &DVector<f64>| d.loglik - 0.5 * (0..pa).map(|a| ridge[a] * b[a] * b[a]).sum::<f64>();
    let penalized_score = |d: &Derivs, b: &DVector<f64>| {
        let mut s = d.score.clone();
        for a in 0..pa {
            s[a] -= ridge[a] * b[a];
        }
        s
    };

    let mut cur = derivs(&z, times, events, &order, &beta, true);
    let mut obj = objective(&cur, &beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let score = penalized_score(&cur, &beta);
        if score.amax() < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut info = cur.info.take().expect("information requested");
        for a in 0..pa {
            info[(a, a)] += ridge[a];
        }
        let Some(chol) = info.cholesky() else {
            return Err(CoxError::MonotoneLikelihood("singular information matrix".into()));
        };
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let d = derivs(&z, times, events, &order, &cand, true);
            let o = objective(&d, &cand);
            if o.is_finite() && o >= obj - 1e-12 * obj.abs().max(1.0) {
                accepted = Some((cand, d, o));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, d, o)) = accepted else {
            // No ascent along the Newton direction: numerically stationary.
            converged = penalized_score(&cur, &beta).amax() < opts.tol.sqrt();
            cur.info = derivs(&z, times, events, &order, &beta, true).info;
            break;
        };
        beta = cand;
        cur = d;
        obj = o;
        if ridge.iter().zip(beta.iter()).any(|(&r, b)| r == 0.0 && b.abs() > DIVERGENCE_BOUND) {
            return Err(CoxError::MonotoneLikelihood(format!("coefficient diverging after {iterations} iterations")));
        }
    }
    let worst = beta.iter().zip(&ridge).filter(|(_, &r)| r == 0.0).fold(0.0f64, |m, (b, _)| m.max(b.abs()));
    if worst > 0.5 * DIVERGENCE_BOUND {
        return Err(CoxError::MonotoneLikelihood(format!("standardized coefficient {worst:.1} indicates separation")));
    }

    let mut std_coefficients = vec![0.0; p];
    let mut coefficients = vec![0.0; p];
    for (a, &j) in active.iter().enumerate() {
        std_coefficients[j] = beta[a];
        coefficients[j] = beta[a] / sds[j];
    }
    let mut fit = CoxFit {
        coefficients,
        std_coefficients,
        baseline: StepFunction::constant(0.0),
        feature_means: means,
        feature_sds: sds,
        penalty: opts.penalty,
        loglik: cur.loglik,
        converged,
        iterations,
        n_events: events.iter().filter(|&&e| e).count(),
    };
    let eta: Vec<f64> = (0..n)
        .map(|i| fit.linear_predictor(&features.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    fit.baseline = breslow(times, events, &eta);
    Ok(fit)
}

/// Breslow cumulative baseline hazard given linear predictors.
pub fn breslow(times: &[f64], events: &[bool], eta: &[f64]) -> StepFunction {
    let order = decreasing_time_order(times);
    let mut jumps = Vec::new();
    let mut s0 = 0.0;
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut d = 0.0;
        while k < order.len() && times[order[k]] == t {
            let i = order[k];
            s0 += eta[i].exp();
            if events[i] {
                d += 1.0;
            }
            k += 1;
        }
        if d > 0.0 {
            jumps.push((t, d / s0));
        }
    }
    jumps.reverse();
    let mut out = StepFunction::constant(0.0);
    let mut cum = 0.0;
    for (t, inc) in jumps {
        cum += inc;
        out.times.push(t);
        out.values.push(cum);
    }
    out
}

/// Ŝ_i(t | ℓ) = exp{-[H0(t) - H0(ℓ)] e^{η_i}} for each row of `features`.
pub fn predict_conditional_survival(
    fit: &CoxFit,
    features: &DMatrix<f64>,
    landmark: f64,
    horizons: &[f64],
) -> Result<SurvivalPrediction> {
    check_horizons(landmark, horizons)?;
    let h_l = fit.baseline.eval(landmark);
    let dh: Vec<f64> = horizons.iter().map(|&t| (fit.baseline.eval(t) - h_l).max(0.0)).collect();
    let last = fit.baseline.last_time().unwrap_or(f64::NEG_INFINITY);
    let risk_scores: Vec<f64> = (0..features.nrows())
        .map(|i| fit.linear_predictor(&features.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    let survival = risk_scores
        .iter()
        .map(|&eta| {
            let r = eta.exp();
            dh.iter().map(|&h| (-h * r).exp()).collect()
        })
        .collect();
    Ok(SurvivalPrediction {
        landmark,
        horizons: horizons.to_vec(),
        survival,
        risk_scores,
        extrapolated: horizons.iter().any(|&t| t > last),
    })
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// Default ridge search grid.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-3, 1e3, 30)
}

/// Fold labels stratified on the event indicator.
pub(crate) fn stratified_folds(events: &[bool], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels = vec![0; events.len()];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..events.len()).filter(|&i| events[i] == class).collect();
        idx.shuffle(rng);
        for i in idx {
            labels[i] = next % k;
            next += 1;
        }
    }
    labels
}

/// Cross-validated deviance choice of the ridge penalty: for each λ, sum
/// over folds of full-data minus training-part partial log-likelihood at the
/// training-part estimate; the maximizer wins (earliest on ties).
pub fn select_ridge_penalty(
    features: &DMatrix<f64>,
    times: &[f64],
    events: &[bool],
    folds: usize,
    lambda_grid: &[f64],
    seed: u64,
) -> f64 {
    select_ridge_penalty_with(features, times, events, folds, lambda_grid, seed, None)
}

pub fn select_ridge_penalty_with(
    features: &DMatrix<f64>,
    times: &[f64],
    events: &[bool],
    folds: usize,
    lambda_grid: &[f64],
    seed: u64,
    penalized: Option<&[bool]>,
) -> f64 {
    assert!(!lambda_grid.is_empty(), "empty penalty grid");
    if lambda_grid.len() == 1 {
        return lambda_grid[0];
    }
    let n = features.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = stratified_folds(events, folds.max(2), &mut rng);
    let full_order = decreasing_time_order(times);

    // Warm-started path from the largest penalty downward, per fold.
    let mut grid_order: Vec<usize> = (0..lambda_grid.len()).collect();
    grid_order.sort_by(|&a, &b| lambda_grid[b].total_cmp(&lambda_grid[a]));
    let per_fold: Vec<Vec<Option<f64>>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
            let xt = features.select_rows(&train);
            let tt: Vec<f64> = train.iter().map(|&i| times[i]).collect();
            let et: Vec<bool> = train.iter().map(|&i| events[i]).collect();
            let mut out = vec![None; lambda_grid.len()];
            let mut warm: Option<Vec<f64>> = None;
            for &g in &grid_order {
                let opts = CoxOptions {
                    penalty: lambda_grid[g],
                    penalized: penalized.map(<[bool]>::to_vec),
                    ..Default::default()
                };
                let Ok(fit) = fit_cox_with(&xt, &tt, &et, &opts, warm.as_deref()) else {
                    continue;
                };
                let full = derivs(features, times, events, &full_order, &DVector::from_column_slice(&fit.coefficients), false);
                out[g] = Some(full.loglik - fit.loglik);
                warm = Some(fit.std_coefficients);
            }
            out
        })
        .collect();
    let scores: Vec<Option<f64>> = (0..lambda_grid.len())
        .map(|g| per_fold.iter().map(|f| f[g]).sum::<Option<f64>>().filter(|v| v.is_finite()))
        .collect();
    let best = scores
        .iter()
        .enumerate()
        .filter_map(|(g, s)| s.map(|v| (g, v)))
        .fold(None::<(usize, f64)>, |acc, (g, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((g, v)),
        });
    match best {
        Some((g, _)) => lambda_grid[g],
        None => {
            let mid = lambda_grid[lambda_grid.len() / 2];
            log::warn!("every ridge fit failed during penalty selection; using {mid}");
            mid
        }
    }
}
