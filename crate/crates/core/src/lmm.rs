//! Random-intercept / random-slope linear mixed model
//! `y_ij = b0 + u_i0 + (b1 + u_i1) t_ij + e_ij`, fitted by maximum likelihood,
//! and best linear unbiased predictors of the subject random effects.
//!
//! Fixed and random designs are both `[1, t]`, so every quantity the
//! likelihood needs reduces to per-subject 2x2 sufficient statistics. The
//! fixed effects and residual variance are profiled out; the relative
//! covariance `D = Sigma / sigma2 = L L^T` is optimized by BFGS on a
//! log-Cholesky parameterization, which keeps `Sigma` positive semidefinite.

use std::fmt;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LandmarkSlice, SubjectRecord};
use crate::optim::{bfgs, BfgsOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmmError {
    #[error("mixed model not estimable: {0}")]
    NonEstimable(String),
}

pub type Result<T> = std::result::Result<T, LmmError>;

/// Random-effects covariance structure, in fallback order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceStructure {
    Full,
    Diagonal,
    InterceptOnly,
}

impl CovarianceStructure {
    fn n_params(self) -> usize {
        match self {
            Self::Full => 3,
            Self::Diagonal => 2,
            Self::InterceptOnly => 1,
        }
    }

    /// Fallback level reported by [`fit_lmm_with_fallback`] (0 = no fallback).
    pub fn fallback_level(self) -> usize {
        match self {
            Self::Full => 0,
            Self::Diagonal => 1,
            Self::InterceptOnly => 2,
        }
    }
}

/// Per-subject sufficient statistics of the non-missing observations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SeriesStats {
    pub n: f64,
    pub st: f64,
    pub stt: f64,
    pub sy: f64,
    pub sty: f64,
    pub syy: f64,
}

impl SeriesStats {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        pairs.into_iter().fold(Self::default(), |mut s, (t, y)| {
            s.n += 1.0;
            s.st += t;
            s.stt += t * t;
            s.sy += y;
            s.sty += t * y;
            s.syy += y * y;
            s
        })
    }

    pub fn from_subject(subject: &SubjectRecord, covariate: usize) -> Self {
        Self::from_pairs(subject.series(covariate))
    }

    fn ztz(&self) -> Matrix2<f64> {
        Matrix2::new(self.n, self.st, self.st, self.stt)
    }

    fn zty(&self) -> Vector2<f64> {
        Vector2::new(self.sy, self.sty)
    }
}

pub fn slice_stats(slice: &LandmarkSlice, covariate: usize) -> Vec<SeriesStats> {
    slice
        .subjects
        .iter()
        .map(|s| SeriesStats::from_subject(s, covariate))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    /// Fixed intercept and slope.
    pub beta: [f64; 2],
    /// Random-effects covariance.
    pub sigma: [[f64; 2]; 2],
    /// Residual variance.
    pub sigma2: f64,
    pub loglik: f64,
    pub converged: bool,
    pub structure: CovarianceStructure,
    pub n_subjects: usize,
    pub n_obs: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Optimizer coordinates at the optimum, usable as a warm start.
    pub theta: Vec<f64>,
}

impl LmmFit {
    fn relative_cov(&self) -> Matrix2<f64> {
        if self.sigma2 > 0.0 {
            Matrix2::new(self.sigma[0][0], self.sigma[0][1], self.sigma[1][0], self.sigma[1][1]) / self.sigma2
        } else {
            Matrix2::zeros()
        }
    }

    /// Key-value text block for debugging and audit dumps.
    pub fn to_kv(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LmmFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "beta0 = {}", self.beta[0])?;
        writeln!(f, "beta1 = {}", self.beta[1])?;
        writeln!(f, "sigma00 = {}", self.sigma[0][0])?;
        writeln!(f, "sigma01 = {}", self.sigma[0][1])?;
        writeln!(f, "sigma11 = {}", self.sigma[1][1])?;
        writeln!(f, "sigma2 = {}", self.sigma2)?;
        writeln!(f, "loglik = {}", self.loglik)?;
        writeln!(f, "converged = {}", self.converged)?;
        writeln!(f, "structure = {:?}", self.structure)?;
        writeln!(f, "n_subjects = {}", self.n_subjects)?;
        writeln!(f, "n_obs = {}", self.n_obs)?;
        writeln!(f, "iterations = {}", self.iterations)
    }
}

/// Predicted random effects `(u0, u1)` per subject, in slice order.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffects {
    pub ids: Vec<String>,
    pub effects: Vec<[f64; 2]>,
}

fn relative_cov_from_theta(structure: CovarianceStructure, theta: &[f64]) -> (Matrix2<f64>, Matrix2<f64>) {
    let l = match structure {
        CovarianceStructure::Full => Matrix2::new(theta[0].exp(), 0.0, theta[1], theta[2].exp()),
        CovarianceStructure::Diagonal => Matrix2::new(theta[0].exp(), 0.0, 0.0, theta[1].exp()),
        CovarianceStructure::InterceptOnly => Matrix2::new(theta[0].exp(), 0.0, 0.0, 0.0),
    };
    (l * l.transpose(), l)
}

struct Profile {
    beta: Vector2<f64>,
    xtx: Matrix2<f64>,
    sigma2: f64,
    loglik: f64,
}

/// Smallest residual variance allowed, relative to the data scale.
fn sigma2_floor(stats: &[SeriesStats]) -> f64 {
    let (n, syy) = stats.iter().fold((0.0, 0.0), |(n, s), st| (n + st.n, s + st.syy));
    1e-14 * (syy / n.max(1.0)).max(1.0)
}

fn solve_fixed(xtx: &Matrix2<f64>, xty: &Vector2<f64>) -> Option<Vector2<f64>> {
    let det = xtx.determinant();
    if det.abs() > 1e-12 * (xtx[(0, 0)] * xtx[(1, 1)]).abs().max(f64::MIN_POSITIVE) {
        xtx.try_inverse().map(|inv| inv * xty)
    } else if xtx[(0, 0)] > 0.0 {
        // No spread in time: slope not identifiable, fit the level only.
        Some(Vector2::new(xty[0] / xtx[(0, 0)], 0.0))
    } else {
        None
    }
}

/// Profiled log-likelihood at relative covariance `d`; also returns the
/// gradient with respect to `d` (as a general 2x2 matrix) when requested.
fn profile(stats: &[SeriesStats], d: &Matrix2<f64>, floor: f64, want_grad: bool) -> Option<(Profile, Matrix2<f64>)> {
    let eye = Matrix2::identity();
    let mut xtx = Matrix2::zeros();
    let mut xty = Vector2::zeros();
    let mut yty = 0.0;
    let mut logdet = 0.0;
    let mut n_obs = 0.0;
    for s in stats.iter().filter(|s| s.n > 0.0) {
        let ztz = s.ztz();
        let zy = s.zty();
        let m = eye + ztz * d;
        let det = m.determinant();
        if !(det > 0.0) {
            return None;
        }
        let minv = m.try_inverse()?;
        let k = d * minv;
        xtx += ztz - ztz * k * ztz;
        xty += zy - ztz * k * zy;
        yty += s.syy - zy.dot(&(k * zy));
        logdet += det.ln();
        n_obs += s.n;
    }
    let beta = solve_fixed(&xtx, &xty)?;
    let r = (yty - xty.dot(&beta)).max(0.0);
    let sigma2 = (r / n_obs).max(floor);
    let loglik = -0.5 * (n_obs * (2.0 * std::f64::consts::PI * sigma2).ln() + logdet + r / sigma2);
    let mut grad = Matrix2::zeros();
    if want_grad {
        let mut vv = Matrix2::zeros();
        let mut pt = Matrix2::zeros();
        for s in stats.iter().filter(|s| s.n > 0.0) {
            let ztz = s.ztz();
            let minv = (eye + ztz * d).try_inverse()?;
            let v = minv * (s.zty() - ztz * beta);
            vv += v * v.transpose();
            pt += (minv * ztz).transpose();
        }
        grad = vv * (0.5 / sigma2) - pt * 0.5;
    }
    Some((Profile { beta, xtx, sigma2, loglik }, grad))
}

/// Negative profiled log-likelihood and its gradient in optimizer coordinates.
fn objective(stats: &[SeriesStats], structure: CovarianceStructure, theta: &[f64], floor: f64) -> (f64, Vec<f64>) {
    let (d, l) = relative_cov_from_theta(structure, theta);
    let Some((p, g)) = profile(stats, &d, floor, true) else {
        return (f64::INFINITY, vec![0.0; theta.len()]);
    };
    let dl = (g + g.transpose()) * l;
    let grad = match structure {
        CovarianceStructure::Full => vec![dl[(0, 0)] * l[(0, 0)], dl[(1, 0)], dl[(1, 1)] * l[(1, 1)]],
        CovarianceStructure::Diagonal => vec![dl[(0, 0)] * l[(0, 0)], dl[(1, 1)] * l[(1, 1)]],
        CovarianceStructure::InterceptOnly => vec![dl[(0, 0)] * l[(0, 0)]],
    };
    (-p.loglik, grad.into_iter().map(|v| -v).collect())
}

fn check_estimable(stats: &[SeriesStats]) -> Result<(usize, usize)> {
    let n_subjects = stats.iter().filter(|s| s.n > 0.0).count();
    let n_obs = stats.iter().map(|s| s.n).sum::<f64>() as usize;
    if n_subjects < 2 {
        return Err(LmmError::NonEstimable(format!("{n_subjects} subject(s) with observations")));
    }
    if n_obs < 3 {
        return Err(LmmError::NonEstimable(format!("{n_obs} observation(s)")));
    }
    Ok((n_subjects, n_obs))
}

fn default_start(stats: &[SeriesStats], structure: CovarianceStructure) -> Vec<f64> {
    let (n, stt) = stats.iter().fold((0.0, 0.0), |(n, s), st| (n + st.n, s + st.stt));
    let t_scale = (stt / n.max(1.0)).sqrt().max(1e-3);
    match structure {
        CovarianceStructure::Full => vec![0.0, 0.0, -t_scale.ln()],
        CovarianceStructure::Diagonal => vec![0.0, -t_scale.ln()],
        CovarianceStructure::InterceptOnly => vec![0.0],
    }
}

/// Fits the model with a given covariance structure from sufficient
/// statistics. `start` optionally warm-starts the optimizer.
pub fn fit_lmm_stats(stats: &[SeriesStats], structure: CovarianceStructure, start: Option<&[f64]>) -> Result<LmmFit> {
    let (n_subjects, n_obs) = check_estimable(stats)?;
    let floor = sigma2_floor(stats);

    // Noiseless data: pooled least squares already fits exactly.
    let pooled = profile(stats, &Matrix2::zeros(), floor, false).map(|(p, _)| p);
    let Some(pooled) = pooled else {
        return Err(LmmError::NonEstimable("singular fixed-effects design".into()));
    };
    if pooled.sigma2 <= floor {
        return Ok(LmmFit {
            beta: [pooled.beta[0], pooled.beta[1]],
            sigma: [[0.0; 2]; 2],
            sigma2: pooled.sigma2,
            loglik: pooled.loglik,
            converged: true,
            structure,
            n_subjects,
            n_obs,
            iterations: 0,
            grad_norm: 0.0,
            theta: vec![-25.0; structure.n_params()],
        });
    }

    let x0 = match start {
        Some(s) if s.len() == structure.n_params() => s.to_vec(),
        _ => default_start(stats, structure),
    };
    let opts = BfgsOptions::default();
    let mut min = bfgs(|th| objective(stats, structure, th, floor), &x0, &opts);
    if min.converged {
        // Convergence is judged on the objective; a few Newton steps then
        // bring the gradient down as well.
        newton_polish(&mut min, |th| objective(stats, structure, th, floor), opts.lower, opts.upper);
    }
    let (d, _) = relative_cov_from_theta(structure, &min.x);
    let Some((p, _)) = profile(stats, &d, floor, false) else {
        return Err(LmmError::NonEstimable("likelihood evaluation failed at optimum".into()));
    };
    let mut sigma = d * p.sigma2;
    clip_psd(&mut sigma);
    let finite = p.loglik.is_finite() && p.beta.iter().all(|b| b.is_finite());
    Ok(LmmFit {
        beta: [p.beta[0], p.beta[1]],
        sigma: [[sigma[(0, 0)], sigma[(0, 1)]], [sigma[(1, 0)], sigma[(1, 1)]]],
        sigma2: p.sigma2,
        loglik: p.loglik,
        converged: min.converged && finite,
        structure,
        n_subjects,
        n_obs,
        iterations: min.iterations,
        grad_norm: min.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        theta: min.x,
    })
}

/// Newton iterations with a central-difference Hessian of the analytic
/// gradient; a step is kept only if it shrinks the gradient without raising
/// the objective beyond rounding.
fn newton_polish<F>(min: &mut crate::optim::Minimum, fg: F, lower: f64, upper: f64)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = min.x.len();
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _ in 0..8 {
        if norm(&min.grad) < 1e-9 || min.x.iter().any(|&v| v <= lower || v >= upper) {
            return;
        }
        let h = 1e-5;
        let mut hess = nalgebra::DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut xp = min.x.clone();
            let mut xm = min.x.clone();
            xp[j] += h;
            xm[j] -= h;
            let (gp, gm) = (fg(&xp).1, fg(&xm).1);
            for i in 0..n {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let Some(chol) = hess.cholesky() else { return };
        let step = chol.solve(&nalgebra::DVector::from_column_slice(&min.grad));
        let x: Vec<f64> = min.x.iter().zip(step.iter()).map(|(a, b)| (a - b).clamp(lower, upper)).collect();
        let (f, g) = fg(&x);
        if !(f.is_finite() && f <= min.f + 1e-12 * min.f.abs().max(1.0) && norm(&g) < norm(&min.grad)) {
            return;
        }
        min.x = x;
        min.f = f;
        min.grad = g;
    }
}

fn clip_psd(m: &mut Matrix2<f64>) {
    let sym = (*m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        *m = sym;
        return;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    *m = eig.eigenvectors * Matrix2::from_diagonal(&clipped) * eig.eigenvectors.transpose();
}

/// Fits the full random intercept + slope model for one covariate of a slice.
/// Missing values are skipped; a non-converged fit is returned with
/// `converged = false`.
pub fn fit_lmm(slice: &LandmarkSlice, covariate: usize) -> Result<LmmFit> {
    fit_lmm_stats(&slice_stats(slice, covariate), CovarianceStructure::Full, None)
}

/// Full model, then diagonal covariance, then random intercept only; the
/// structure of the returned fit records which level succeeded.
pub fn fit_lmm_with_fallback(stats: &[SeriesStats]) -> Result<LmmFit> {
    let mut last: Option<LmmFit> = None;
    for structure in [
        CovarianceStructure::Full,
        CovarianceStructure::Diagonal,
        CovarianceStructure::InterceptOnly,
    ] {
        match fit_lmm_stats(stats, structure, None) {
            Ok(fit) if fit.converged => return Ok(fit),
            Ok(fit) => last = Some(fit),
            Err(e) => return Err(e),
        }
    }
    match last {
        Some(fit) => Err(LmmError::NonEstimable(format!(
            "no covariance structure converged (last: {:?} after {} iterations)",
            fit.structure, fit.iterations
        ))),
        None => Err(LmmError::NonEstimable("no covariance structure converged".into())),
    }
}

/// BLUP `Sigma Z^T V^-1 (y - W beta)` for one subject's statistics.
pub fn blup_from_stats(fit: &LmmFit, stats: &SeriesStats) -> [f64; 2] {
    if stats.n == 0.0 {
        return [0.0, 0.0];
    }
    let d = fit.relative_cov();
    let ztz = stats.ztz();
    let beta = Vector2::new(fit.beta[0], fit.beta[1]);
    let resid = stats.zty() - ztz * beta;
    match (Matrix2::identity() + ztz * d).try_inverse() {
        Some(minv) => {
            let u = d * minv * resid;
            [u[0], u[1]]
        }
        None => [0.0, 0.0],
    }
}

pub fn predict_blup(fit: &LmmFit, slice: &LandmarkSlice, covariate: usize) -> RandomEffects {
    RandomEffects {
        ids: slice.subjects.iter().map(|s| s.id.clone()).collect(),
        effects: slice
            .subjects
            .iter()
            .map(|s| blup_from_stats(fit, &SeriesStats::from_subject(s, covariate)))
            .collect(),
    }
}

/// BLUPs for subjects not used in fitting, from the frozen fit.
pub fn predict_blup_newdata(fit: &LmmFit, newslice: &LandmarkSlice, covariate: usize) -> RandomEffects {
    predict_blup(fit, newslice, covariate)
}

/// Marginal Gaussian log-likelihood at arbitrary parameters.
pub fn loglik_at(stats: &[SeriesStats], beta: [f64; 2], sigma: [[f64; 2]; 2], sigma2: f64) -> f64 {
    let d = Matrix2::new(sigma[0][0], sigma[0][1], sigma[1][0], sigma[1][1]) / sigma2;
    let beta = Vector2::new(beta[0], beta[1]);
    let mut total = 0.0;
    for s in stats.iter().filter(|s| s.n > 0.0) {
        let ztz = s.ztz();
        let zy = s.zty();
        let m = Matrix2::identity() + ztz * d;
        let k = d * m.try_inverse().expect("I + S D is invertible for PSD D");
        // r^T A^-1 r with r = y - Z beta, expanded through the sufficient statistics.
        let ztr = zy - ztz * beta;
        let rr = s.syy - 2.0 * beta.dot(&zy) + beta.dot(&(ztz * beta));
        let quad = rr - ztr.dot(&(k * ztr));
        total += -0.5 * (s.n * (2.0 * std::f64::consts::PI * sigma2).ln() + m.determinant().ln() + quad / sigma2);
    }
    total
}

/// Sampling covariance of the fixed effects, `sigma2 (W^T V^-1 W)^-1` scaled.
pub fn fixed_effects_cov(fit: &LmmFit, stats: &[SeriesStats]) -> Option<[[f64; 2]; 2]> {
    let floor = sigma2_floor(stats);
    let (p, _) = profile(stats, &fit.relative_cov(), floor, false)?;
    let inv = p.xtx.try_inverse()? * fit.sigma2;
    Some([[inv[(0, 0)], inv[(0, 1)]], [inv[(1, 0)], inv[(1, 1)]]])
}
