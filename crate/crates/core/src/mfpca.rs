//! Univariate FPCA with PACE scores on grid-aligned data, and multivariate
//! FPCA built from the stacked univariate scores.
//!
//! Inner products use trapezoid quadrature on the (possibly non-uniform)
//! grid. The covariance surface is the pairwise-complete sample covariance
//! per grid pair; only its diagonal is smoothed, by extrapolating nearby
//! off-diagonal entries, which separates the measurement-error nugget.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LandmarkSlice;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MfpcaError {
    #[error("FPCA not estimable: {0}")]
    NonEstimable(String),
}

pub type Result<T> = std::result::Result<T, MfpcaError>;

pub const DEFAULT_PVE: f64 = 0.9;

const GRID_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UfpcaFit {
    pub covariate: usize,
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
    pub mean: Vec<f64>,
    /// `eigenfunctions[k][g]`, orthonormal under the quadrature weights.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// All non-negative eigenvalues of the smoothed covariance operator.
    pub all_eigenvalues: Vec<f64>,
    pub noise_var: f64,
    pub pve_achieved: f64,
    pub dropped_grid_points: usize,
}

impl UfpcaFit {
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    fn grid_index(&self, t: f64) -> Option<usize> {
        let pos = self.grid.partition_point(|&g| g < t - GRID_MATCH_TOL);
        (pos < self.grid.len() && (self.grid[pos] - t).abs() <= GRID_MATCH_TOL).then_some(pos)
    }
}

/// Trapezoid quadrature weights on a strictly increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    if g == 1 {
        return vec![1.0];
    }
    (0..g)
        .map(|i| {
            let left = if i > 0 { grid[i] - grid[i - 1] } else { 0.0 };
            let right = if i + 1 < g { grid[i + 1] - grid[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

fn inner(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

/// Least-squares polynomial intercept at x = 0.
fn poly_intercept(points: &[(f64, f64)], degree: usize) -> f64 {
    let cols = degree + 1;
    let x = DMatrix::from_fn(points.len(), cols, |i, j| points[i].0.powi(j as i32));
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let xtx = x.transpose() * &x;
    match xtx.clone().cholesky() {
        Some(ch) => ch.solve(&(x.transpose() * y))[0],
        None => points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64,
    }
}

/// Fits univariate FPCA for one covariate of a grid-aligned slice.
pub fn fit_ufpca(slice: &LandmarkSlice, covariate: usize, pve1: f64) -> Result<UfpcaFit> {
    // Observation table on the union of observed times.
    let mut times: Vec<f64> = slice
        .subjects
        .iter()
        .flat_map(|s| s.series(covariate).map(|(t, _)| t))
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= GRID_MATCH_TOL);
    let counts: Vec<usize> = times
        .iter()
        .map(|&t| {
            slice
                .subjects
                .iter()
                .filter(|s| s.series(covariate).any(|(u, _)| (u - t).abs() <= GRID_MATCH_TOL))
                .count()
        })
        .collect();
    let grid: Vec<f64> = times.iter().zip(&counts).filter(|(_, &c)| c >= 2).map(|(&t, _)| t).collect();
    let dropped_grid_points = times.len() - grid.len();
    if dropped_grid_points > 0 {
        log::warn!(
            "covariate {}: {dropped_grid_points} grid point(s) with fewer than 2 observations dropped",
            slice.longitudinal_names.get(covariate).map_or("?", String::as_str)
        );
    }
    let g = grid.len();
    if g < 2 {
        return Err(MfpcaError::NonEstimable(format!("only {g} grid point(s) with at least 2 observations")));
    }

    // Subject x grid matrix with NaN for unobserved.
    let find = |t: f64| {
        let pos = grid.partition_point(|&x| x < t - GRID_MATCH_TOL);
        (pos < g && (grid[pos] - t).abs() <= GRID_MATCH_TOL).then_some(pos)
    };
    let mut obs = vec![vec![f64::NAN; g]; slice.n()];
    for (row, s) in obs.iter_mut().zip(&slice.subjects) {
        for (t, y) in s.series(covariate) {
            if let Some(k) = find(t) {
                row[k] = y;
            }
        }
    }
    let mean: Vec<f64> = (0..g)
        .map(|k| {
            let (sum, n) = obs.iter().filter(|r| !r[k].is_nan()).fold((0.0, 0.0), |(s, n), r| (s + r[k], n + 1.0));
            sum / n
        })
        .collect();

    // Pairwise-complete covariance; NaN where fewer than 2 subjects share a pair.
    let mut cov = DMatrix::from_element(g, g, f64::NAN);
    for a in 0..g {
        for b in a..g {
            let (mut sum, mut n) = (0.0, 0.0);
            for r in &obs {
                if !r[a].is_nan() && !r[b].is_nan() {
                    sum += (r[a] - mean[a]) * (r[b] - mean[b]);
                    n += 1.0;
                }
            }
            if n >= 2.0 {
                cov[(a, b)] = sum / (n - 1.0);
                cov[(b, a)] = cov[(a, b)];
            }
        }
    }
    fill_missing_pairs(&mut cov)?;

    // Smooth the diagonal from the near-diagonal band.
    let raw_diag: Vec<f64> = (0..g).map(|k| cov[(k, k)]).collect();
    let band = 2usize;
    let mut smooth_diag = vec![0.0; g];
    for k in 0..g {
        let lo = k.saturating_sub(band);
        let hi = (k + band).min(g - 1);
        let points: Vec<(f64, f64)> = (lo..=hi).filter(|&h| h != k).map(|h| (grid[h] - grid[k], cov[(k, h)])).collect();
        let two_sided = lo < k && hi > k;
        let degree = if two_sided { points.len().saturating_sub(1).min(2) } else { points.len().saturating_sub(1).min(1) };
        smooth_diag[k] = poly_intercept(&points, degree).max(0.0);
    }
    let noise_var = (raw_diag.iter().zip(&smooth_diag).map(|(r, s)| r - s).sum::<f64>() / g as f64).max(0.0);
    for k in 0..g {
        cov[(k, k)] = smooth_diag[k];
    }

    // Eigen-decomposition of the quadrature-weighted operator.
    let weights = trapezoid_weights(&grid);
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let op = DMatrix::from_fn(g, g, |a, b| sw[a] * cov[(a, b)] * sw[b]);
    let (values, vectors) = sorted_eigen(op);
    let all_eigenvalues: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = all_eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(MfpcaError::NonEstimable("covariance has no positive eigenvalue".into()));
    }
    let rank = all_eigenvalues.iter().filter(|&&v| v > 1e-10 * all_eigenvalues[0]).count();
    let k_keep = select_by_pve(&all_eigenvalues[..rank], total, pve1);
    let eigenfunctions: Vec<Vec<f64>> = (0..k_keep)
        .map(|k| {
            let mut phi: Vec<f64> = (0..g).map(|a| vectors[(a, k)] / sw[a]).collect();
            orient(&mut phi, &weights);
            phi
        })
        .collect();
    let eigenvalues = all_eigenvalues[..k_keep].to_vec();
    let pve_achieved = eigenvalues.iter().sum::<f64>() / total;
    Ok(UfpcaFit {
        covariate,
        grid,
        weights,
        mean,
        eigenfunctions,
        eigenvalues,
        all_eigenvalues,
        noise_var,
        pve_achieved,
        dropped_grid_points,
    })
}

fn fill_missing_pairs(cov: &mut DMatrix<f64>) -> Result<()> {
    let g = cov.nrows();
    if (0..g).any(|k| cov[(k, k)].is_nan()) {
        return Err(MfpcaError::NonEstimable("grid point variance not estimable".into()));
    }
    let corr = |c: &DMatrix<f64>, a: usize, b: usize| c[(a, b)] / (c[(a, a)] * c[(b, b)]).sqrt().max(f64::MIN_POSITIVE);
    let mut by_lag = vec![(0.0, 0.0); g];
    for a in 0..g {
        for b in a + 1..g {
            if !cov[(a, b)].is_nan() {
                by_lag[b - a].0 += corr(cov, a, b);
                by_lag[b - a].1 += 1.0;
            }
        }
    }
    let (all_sum, all_n) = by_lag.iter().fold((0.0, 0.0), |(s, n), &(a, b)| (s + a, n + b));
    if all_n == 0.0 {
        return Err(MfpcaError::NonEstimable("no grid pair observed jointly".into()));
    }
    for a in 0..g {
        for b in a + 1..g {
            if cov[(a, b)].is_nan() {
                let (s, n) = by_lag[b - a];
                let rho = if n > 0.0 { s / n } else { all_sum / all_n };
                let v = rho * (cov[(a, a)] * cov[(b, b)]).sqrt();
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
    }
    Ok(())
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Smallest K whose cumulative share of `total` reaches `pve`.
fn select_by_pve(values: &[f64], total: f64, pve: f64) -> usize {
    let mut cum = 0.0;
    for (k, v) in values.iter().enumerate() {
        cum += v;
        if cum / total >= pve - 1e-12 {
            return k + 1;
        }
    }
    values.len()
}

/// Flips a function so its integral is positive, or its first clearly
/// non-zero value when the integral vanishes.
fn orient(phi: &mut [f64], weights: &[f64]) {
    let integral: f64 = phi.iter().zip(weights).map(|(p, w)| p * w).sum();
    let abs_integral: f64 = phi.iter().zip(weights).map(|(p, w)| p.abs() * w).sum();
    let sign = if integral.abs() > 1e-6 * abs_integral {
        integral.signum()
    } else {
        let scale = phi.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        phi.iter().find(|p| p.abs() > 1e-6 * scale).map_or(1.0, |p| p.signum())
    };
    if sign < 0.0 {
        phi.iter_mut().for_each(|p| *p = -*p);
    }
}

/// PACE conditional-expectation scores of one subject given its observed
/// `(time, value)` pairs. Unmatched times are ignored; no observation gives
/// the prior mean (zero).
pub fn pace_subject(fit: &UfpcaFit, pairs: impl IntoIterator<Item = (f64, f64)>) -> Vec<f64> {
    let k = fit.n_components();
    let observed: Vec<(usize, f64)> = pairs.into_iter().filter_map(|(t, y)| fit.grid_index(t).map(|g| (g, y))).collect();
    if observed.is_empty() || k == 0 {
        return vec![0.0; k];
    }
    let m = observed.len();
    // Tiny jitter keeps the system invertible when the noise estimate is zero.
    let noise = fit.noise_var.max(1e-10 * fit.eigenvalues[0]);
    let phi = DMatrix::from_fn(m, k, |r, c| fit.eigenfunctions[c][observed[r].0]);
    let lambda = DMatrix::from_diagonal(&DVector::from_vec(fit.eigenvalues.clone()));
    let cov_y = &phi * &lambda * phi.transpose() + DMatrix::identity(m, m) * noise;
    let resid = DVector::from_iterator(m, observed.iter().map(|&(g, y)| y - fit.mean[g]));
    let Some(ch) = cov_y.cholesky() else {
        return vec![0.0; k];
    };
    let xi = &lambda * phi.transpose() * ch.solve(&resid);
    xi.iter().copied().collect()
}

/// Univariate PACE scores for every subject of a slice (n x K_q).
pub fn pace_scores(fit: &UfpcaFit, slice: &LandmarkSlice, covariate: usize) -> DMatrix<f64> {
    let k = fit.n_components();
    let mut out = DMatrix::zeros(slice.n(), k);
    for (i, s) in slice.subjects.iter().enumerate() {
        for (c, v) in pace_subject(fit, s.series(covariate)).into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct MfpcaFit {
    /// Univariate fits of the retained covariates.
    pub univariate: Vec<UfpcaFit>,
    /// Covariates whose univariate fit failed.
    pub dropped_covariates: Vec<usize>,
    /// Training means of the stacked univariate scores.
    pub score_means: Vec<f64>,
    /// Columns `c_k` mapping stacked univariate scores to multivariate scores.
    pub coefficients: DMatrix<f64>,
    /// All multivariate eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub n_components: usize,
    /// Training multivariate scores (n x K).
    pub scores: DMatrix<f64>,
}

impl MfpcaFit {
    fn stacked_dim(&self) -> usize {
        self.univariate.iter().map(UfpcaFit::n_components).sum()
    }

    /// Multivariate eigenfunction `k` restricted to covariate block `block`,
    /// on that covariate's grid.
    pub fn eigenfunction(&self, k: usize, block: usize) -> Vec<f64> {
        let offset: usize = self.univariate[..block].iter().map(UfpcaFit::n_components).sum();
        let u = &self.univariate[block];
        (0..u.grid.len())
            .map(|g| (0..u.n_components()).map(|m| self.coefficients[(offset + m, k)] * u.eigenfunctions[m][g]).sum())
            .collect()
    }

    /// `covariate,time,psi_1..psi_K` table for plotting.
    pub fn eigenfunctions_csv(&self, names: &[String]) -> String {
        let mut out = String::from("covariate,time");
        for k in 0..self.n_components {
            out.push_str(&format!(",psi_{}", k + 1));
        }
        out.push('\n');
        for (b, u) in self.univariate.iter().enumerate() {
            let psi: Vec<Vec<f64>> = (0..self.n_components).map(|k| self.eigenfunction(k, b)).collect();
            let name = names.get(u.covariate).cloned().unwrap_or_else(|| u.covariate.to_string());
            for (g, t) in u.grid.iter().enumerate() {
                out.push_str(&format!("{name},{t}"));
                for p in &psi {
                    out.push_str(&format!(",{}", p[g]));
                }
                out.push('\n');
            }
        }
        out
    }

    fn stacked_scores(&self, slice: &LandmarkSlice) -> DMatrix<f64> {
        let mut xi = DMatrix::zeros(slice.n(), self.stacked_dim());
        let mut offset = 0;
        for u in &self.univariate {
            let s = pace_scores(u, slice, u.covariate);
            for c in 0..s.ncols() {
                for i in 0..s.nrows() {
                    xi[(i, offset + c)] = s[(i, c)] - self.score_means[offset + c];
                }
            }
            offset += s.ncols();
        }
        xi
    }
}

/// Multivariate FPCA over all longitudinal covariates of a grid-aligned slice.
pub fn fit_mfpca(slice: &LandmarkSlice, pve1: f64, pve2: f64) -> Result<MfpcaFit> {
    let q = slice.n_longitudinal();
    let fits: Vec<Result<UfpcaFit>> = (0..q).into_par_iter().map(|c| fit_ufpca(slice, c, pve1)).collect();
    let mut univariate = Vec::new();
    let mut dropped_covariates = Vec::new();
    for (c, fit) in fits.into_iter().enumerate() {
        match fit {
            Ok(f) => univariate.push(f),
            Err(e) => {
                log::warn!("covariate {} dropped from MFPCA: {e}", slice.longitudinal_names[c]);
                dropped_covariates.push(c);
            }
        }
    }
    if univariate.is_empty() {
        return Err(MfpcaError::NonEstimable("no covariate admits a univariate FPCA".into()));
    }
    let n = slice.n();
    if n < 2 {
        return Err(MfpcaError::NonEstimable("fewer than 2 subjects".into()));
    }

    let dim: usize = univariate.iter().map(UfpcaFit::n_components).sum();
    let mut raw = DMatrix::zeros(n, dim);
    let mut offset = 0;
    for u in &univariate {
        let s = pace_scores(u, slice, u.covariate);
        raw.view_mut((0, offset), (n, s.ncols())).copy_from(&s);
        offset += s.ncols();
    }
    let score_means: Vec<f64> = (0..dim).map(|c| raw.column(c).mean()).collect();
    let mut xi = raw;
    for c in 0..dim {
        for i in 0..n {
            xi[(i, c)] -= score_means[c];
        }
    }
    let cov = xi.transpose() * &xi / (n as f64 - 1.0);
    let (values, mut vectors) = sorted_eigen(cov);
    let eigenvalues: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(MfpcaError::NonEstimable("univariate scores have no variance".into()));
    }
    let rank = eigenvalues.iter().filter(|&&v| v > 1e-12 * eigenvalues[0]).count();
    let n_components = select_by_pve(&eigenvalues[..rank], total, pve2);

    let mut fit = MfpcaFit {
        univariate,
        dropped_covariates,
        score_means,
        coefficients: DMatrix::zeros(dim, n_components),
        eigenvalues,
        n_components,
        scores: DMatrix::zeros(n, n_components),
    };
    // Orient each multivariate eigenfunction by its total integral.
    for k in 0..n_components {
        fit.coefficients.set_column(k, &vectors.column(k));
        let mut integral = 0.0;
        let mut abs_integral = 0.0;
        let mut first = 0.0;
        for b in 0..fit.univariate.len() {
            let psi = fit.eigenfunction(k, b);
            let w = &fit.univariate[b].weights;
            integral += inner(w, &psi, &vec![1.0; psi.len()]);
            abs_integral += psi.iter().zip(w).map(|(p, w)| p.abs() * w).sum::<f64>();
            if first == 0.0 {
                first = psi.iter().copied().find(|p| p.abs() > 1e-12).unwrap_or(0.0);
            }
        }
        let flip = if integral.abs() > 1e-6 * abs_integral { integral < 0.0 } else { first < 0.0 };
        if flip {
            let neg = -vectors.column(k);
            vectors.set_column(k, &neg);
            fit.coefficients.set_column(k, &neg);
        }
    }
    fit.scores = &xi * &fit.coefficients;
    Ok(fit)
}

/// Multivariate scores of new subjects from the frozen training fit.
pub fn project_mfpca(fit: &MfpcaFit, newslice: &LandmarkSlice) -> DMatrix<f64> {
    if newslice.n() == 0 {
        return DMatrix::zeros(0, fit.n_components);
    }
    fit.stacked_scores(newslice) * &fit.coefficients
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LandmarkMode, SubjectRecord};

    fn slice_from_curves(grid: &[f64], curves: &[Vec<Vec<f64>>]) -> LandmarkSlice {
        let q = curves[0][0].len();
        LandmarkSlice {
            landmark: *grid.last().unwrap(),
            mode: LandmarkMode::Strict,
            subjects: curves
                .iter()
                .enumerate()
                .map(|(i, rows)| SubjectRecord {
                    id: i.to_string(),
                    event_time: grid.last().unwrap() + 1.0,
                    event: false,
                    baseline: vec![],
                    visits: grid.to_vec(),
                    longitudinal: rows.clone(),
                })
                .collect(),
            baseline_names: vec![],
            longitudinal_names: (0..q).map(|c| format!("y{c}")).collect(),
        }
    }

    #[test]
    fn trapezoid_weights_nonuniform() {
        assert_eq!(trapezoid_weights(&[0.0, 0.5, 1.0, 2.0]), vec![0.25, 0.5, 0.75, 0.5]);
    }

    #[test]
    fn constant_trajectories_give_flat_first_component() {
        let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let levels = [-1.3, 0.2, 0.7, -0.4, 1.9, 0.0, -0.8, 0.5];
        let curves: Vec<Vec<Vec<f64>>> = levels.iter().map(|&c| grid.iter().map(|_| vec![c]).collect()).collect();
        let fit = fit_ufpca(&slice_from_curves(&grid, &curves), 0, 0.9).unwrap();
        assert_eq!(fit.n_components(), 1);
        assert!(fit.eigenvalues[0] / fit.all_eigenvalues.iter().sum::<f64>() > 0.99);
        let phi = &fit.eigenfunctions[0];
        assert!(phi.iter().all(|p| (p - phi[0]).abs() < 1e-8 && *p > 0.0));
        assert!((inner(&fit.weights, phi, phi) - 1.0).abs() < 1e-10);
        assert!(fit.noise_var < 1e-10);
    }

    #[test]
    fn full_pve_keeps_all_positive_components() {
        let grid = [0.0, 0.5, 1.0, 1.5];
        let curves: Vec<Vec<Vec<f64>>> = (0..6)
            .map(|i| {
                let a = i as f64 - 2.5;
                let b = ((i * 7) % 5) as f64 - 2.0;
                grid.iter().map(|&t| vec![a + b * t]).collect()
            })
            .collect();
        let fit = fit_ufpca(&slice_from_curves(&grid, &curves), 0, 1.0).unwrap();
        // Linear trajectories span a rank-2 covariance.
        assert_eq!(fit.n_components(), 2);
    }

    #[test]
    fn pace_scores_shrink_under_large_noise() {
        let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let curves: Vec<Vec<Vec<f64>>> = (0..10).map(|i| grid.iter().map(|_| vec![i as f64 - 4.5]).collect()).collect();
        let mut fit = fit_ufpca(&slice_from_curves(&grid, &curves), 0, 0.9).unwrap();
        fit.noise_var = 1e6;
        let s = pace_subject(&fit, grid.iter().map(|&t| (t, 4.0)));
        assert!(s[0].abs() < 1e-3);
        assert!(pace_subject(&fit, std::iter::empty()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_grid_point_is_not_estimable() {
        let curves: Vec<Vec<Vec<f64>>> = (0..4).map(|i| vec![vec![i as f64]]).collect();
        let err = fit_ufpca(&slice_from_curves(&[0.0], &curves), 0, 0.9);
        assert!(matches!(err, Err(MfpcaError::NonEstimable(_))));
    }

    #[test]
    fn project_empty_slice() {
        let grid: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
        let curves: Vec<Vec<Vec<f64>>> = (0..8).map(|i| grid.iter().map(|&t| vec![(i as f64 - 3.5) * (1.0 + t)]).collect()).collect();
        let slice = slice_from_curves(&grid, &curves);
        let fit = fit_mfpca(&slice, 0.9, 0.9).unwrap();
        let empty = slice.select(&[]);
        assert_eq!(project_mfpca(&fit, &empty).shape(), (0, fit.n_components));
        let csv = fit.eigenfunctions_csv(&slice.longitudinal_names);
        assert!(csv.starts_with("covariate,time,psi_1"));
        assert_eq!(csv.lines().count(), 1 + grid.len());
    }
}
