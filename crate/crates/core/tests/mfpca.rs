mod common;

use common::*;
use dynsurv::dataset::LandmarkSlice;
use dynsurv::mfpca::{fit_mfpca, fit_ufpca, pace_subject, project_mfpca, trapezoid_weights, UfpcaFit};
use proptest::prelude::*;
use std::f64::consts::PI;

fn grid(g: usize) -> Vec<f64> {
    (0..g).map(|i| i as f64 / (g - 1) as f64).collect()
}

fn quad(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

/// Subjects observed on `ts` with `q` covariates produced by `curve(i, q, t)`.
fn multi_slice(n: usize, q: usize, ts: &[f64], mut curve: impl FnMut(usize, usize, f64) -> f64) -> LandmarkSlice {
    let subjects = (0..n)
        .map(|i| {
            let long = ts.iter().map(|&t| (0..q).map(|c| curve(i, c, t)).collect()).collect();
            subject(&format!("s{i}"), 2.0, i % 2 == 0, vec![], ts.to_vec(), long)
        })
        .collect();
    slice_of(subjects, 1.0)
}

/// Random-amplitude curves sum_k xi_k * sqrt(nu_k) * phi_k(t) plus noise.
fn random_curves(seed: u64, n: usize, ts: &[f64], nu: &[f64], phis: &[fn(f64) -> f64], noise: f64) -> LandmarkSlice {
    let mut r = rng(seed);
    let xi: Vec<Vec<f64>> = (0..n).map(|_| nu.iter().map(|v| v.sqrt() * normal(&mut r)).collect()).collect();
    let eps: Vec<Vec<f64>> = (0..n).map(|_| ts.iter().map(|_| noise * normal(&mut r)).collect()).collect();
    let ts_owned = ts.to_vec();
    multi_slice(n, 1, ts, move |i, _, t| {
        let g = ts_owned.iter().position(|&u| u == t).unwrap();
        1.0 + t + xi[i].iter().zip(phis).map(|(x, f)| x * f(t)).sum::<f64>() + eps[i][g]
    })
}

fn sin1(t: f64) -> f64 {
    2f64.sqrt() * (2.0 * PI * t).sin()
}
fn cos1(t: f64) -> f64 {
    2f64.sqrt() * (2.0 * PI * t).cos()
}

#[test]
fn recovers_single_sine_eigenfunction() {
    let ts = grid(21);
    let slice = random_curves(1, 300, &ts, &[1.0], &[sin1], 0.0);
    let fit = fit_ufpca(&slice, 0, 0.9).unwrap();
    assert_eq!(fit.n_components(), 1);
    let truth: Vec<f64> = ts.iter().map(|&t| sin1(t)).collect();
    let w = trapezoid_weights(&ts);
    let align = quad(&w, &fit.eigenfunctions[0], &truth).abs();
    assert!(align > 0.95, "alignment {align}");
}

#[test]
fn constant_trajectories_have_one_dominant_component() {
    let ts = grid(11);
    let mut r = rng(2);
    let levels: Vec<f64> = (0..100).map(|_| normal(&mut r)).collect();
    let slice = multi_slice(100, 1, &ts, |i, _, _| levels[i]);
    let fit = fit_ufpca(&slice, 0, 0.9).unwrap();
    let total: f64 = fit.all_eigenvalues.iter().sum();
    assert!(fit.all_eigenvalues[0] / total > 0.99);
    // A constant eigenfunction, positive by the sign convention.
    let phi = &fit.eigenfunctions[0];
    assert!(phi.iter().all(|&p| (p - 1.0).abs() < 1e-6), "{phi:?}");
}

#[test]
fn full_pve_keeps_every_positive_eigenvalue() {
    let ts = grid(6);
    let slice = random_curves(3, 80, &ts, &[1.0, 0.5], &[sin1, cos1], 0.2);
    let fit = fit_ufpca(&slice, 0, 1.0).unwrap();
    let positive = fit.all_eigenvalues.iter().filter(|&&v| v > 1e-10 * fit.all_eigenvalues[0]).count();
    assert_eq!(fit.n_components(), positive);
    assert!((fit.pve_achieved - 1.0).abs() < 1e-12);
}

#[test]
fn pace_matches_quadrature_projection_without_noise() {
    let ts = grid(41);
    let slice = random_curves(4, 200, &ts, &[1.0], &[sin1], 0.0);
    let mut fit = fit_ufpca(&slice, 0, 0.9).unwrap();
    fit.noise_var = 0.0;
    let w = &fit.weights;
    // A curve lying exactly in the estimated span.
    let xi = 0.7;
    let y: Vec<f64> = (0..ts.len()).map(|g| fit.mean[g] + xi * fit.eigenfunctions[0][g]).collect();
    let pace = pace_subject(&fit, ts.iter().copied().zip(y.iter().copied()));
    let resid: Vec<f64> = y.iter().zip(&fit.mean).map(|(a, b)| a - b).collect();
    let projection = quad(w, &resid, &fit.eigenfunctions[0]);
    assert!((pace[0] - projection).abs() < 1e-6, "{} vs {projection}", pace[0]);
}

#[test]
fn huge_noise_shrinks_scores_to_zero() {
    let ts = grid(11);
    let slice = random_curves(5, 100, &ts, &[1.0], &[sin1], 0.1);
    let mut fit = fit_ufpca(&slice, 0, 0.9).unwrap();
    fit.noise_var = 1e6;
    for s in &slice.subjects {
        let xi = pace_subject(&fit, s.series(0));
        assert!(xi.iter().all(|v| v.abs() < 1e-4), "{xi:?}");
    }
}

/// Conditional expectation from a single observation, computed by hand.
fn single_point_scores(fit: &UfpcaFit, g: usize, y: f64, noise: f64) -> Vec<f64> {
    let phi: Vec<f64> = fit.eigenfunctions.iter().map(|f| f[g]).collect();
    let var: f64 = phi.iter().zip(&fit.eigenvalues).map(|(p, l)| p * p * l).sum::<f64>() + noise;
    phi.iter().zip(&fit.eigenvalues).map(|(p, l)| l * p * (y - fit.mean[g]) / var).collect()
}

#[test]
fn single_observation_scores_shrink() {
    let ts = grid(11);
    let slice = random_curves(6, 150, &ts, &[1.0, 0.5], &[sin1, cos1], 0.3);
    let fit = fit_ufpca(&slice, 0, 0.99).unwrap();
    assert!(fit.noise_var > 0.0);
    let g = 3;
    let y = fit.mean[g] + 1.5;
    let xi = pace_subject(&fit, [(ts[g], y)]);
    assert!(xi.iter().all(|v| v.is_finite()));
    let expected = single_point_scores(&fit, g, y, fit.noise_var);
    assert!(max_abs_diff(&xi, &expected) < 1e-10);
    let noiseless = single_point_scores(&fit, g, y, 0.0);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&xi) <= norm(&noiseless) + 1e-12);
}

#[test]
fn no_observation_gives_prior_mean() {
    let ts = grid(6);
    let slice = random_curves(7, 50, &ts, &[1.0], &[sin1], 0.1);
    let fit = fit_ufpca(&slice, 0, 0.9).unwrap();
    let xi = pace_subject(&fit, std::iter::empty());
    assert!(xi.iter().all(|&v| v == 0.0));
}

#[test]
fn single_covariate_mfpca_reduces_to_univariate() {
    let ts = grid(11);
    let slice = random_curves(8, 120, &ts, &[1.0, 0.4], &[sin1, cos1], 0.2);
    let uni = fit_ufpca(&slice, 0, 0.9).unwrap();
    let multi = fit_mfpca(&slice, 0.9, 0.99).unwrap();
    let k = uni.n_components();
    assert_eq!(multi.n_components, k);
    let n = slice.n();
    let mut u: Vec<Vec<f64>> = vec![vec![0.0; n]; k];
    for (i, s) in slice.subjects.iter().enumerate() {
        for (c, v) in pace_subject(&uni, s.series(0)).into_iter().enumerate() {
            u[c][i] = v;
        }
    }
    for col in &mut u {
        let mean = col.iter().sum::<f64>() / n as f64;
        col.iter_mut().for_each(|v| *v -= mean);
    }
    // Estimated scores are only approximately uncorrelated; the multivariate
    // step rotates them by an angle of order cov_ab / (var_a - var_b).
    let cov = |a: usize, b: usize| u[a].iter().zip(&u[b]).map(|(x, y)| x * y).sum::<f64>() / (n as f64 - 1.0);
    for c in 0..k {
        let angle: f64 = (0..k).filter(|&b| b != c).map(|b| cov(c, b).abs() / (cov(c, c) - cov(b, b)).abs()).sum();
        let scale = u.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let m: Vec<f64> = (0..n).map(|i| multi.scores[(i, c)]).collect();
        let same = u[c].iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let flipped = u[c].iter().zip(&m).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        let bound = 2.0 * angle * scale + 1e-10;
        assert!(same.min(flipped) <= bound, "component {c}: {} > {bound}", same.min(flipped));
    }
}

#[test]
fn single_covariate_with_one_component_is_exact() {
    let ts = grid(11);
    let slice = random_curves(15, 120, &ts, &[1.0], &[sin1], 0.2);
    let uni = fit_ufpca(&slice, 0, 0.8).unwrap();
    assert_eq!(uni.n_components(), 1);
    let multi = fit_mfpca(&slice, 0.8, 0.9).unwrap();
    let u: Vec<f64> = slice.subjects.iter().map(|s| pace_subject(&uni, s.series(0))[0]).collect();
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    let m: Vec<f64> = (0..slice.n()).map(|i| multi.scores[(i, 0)]).collect();
    let same = u.iter().zip(&m).map(|(a, b)| (a - mean - b).abs()).fold(0.0, f64::max);
    let flipped = u.iter().zip(&m).map(|(a, b)| (a - mean + b).abs()).fold(0.0, f64::max);
    assert!(same.min(flipped) < 1e-10);
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn duplicated_covariate_concentrates_variance() {
    let ts = grid(11);
    let base = random_curves(9, 150, &ts, &[1.0, 0.6], &[sin1, cos1], 0.2);
    let uni = fit_ufpca(&base, 0, 0.9).unwrap();
    let uni_share = uni.eigenvalues[0] / uni.all_eigenvalues.iter().sum::<f64>();
    let doubled = multi_slice(base.n(), 2, &ts, |i, _, t| {
        let s = &base.subjects[i];
        let g = s.visits.iter().position(|&u| u == t).unwrap();
        s.longitudinal[g][0]
    });
    let fit = fit_mfpca(&doubled, 0.9, 0.9).unwrap();
    let share = fit.eigenvalues[0] / fit.eigenvalues.iter().sum::<f64>();
    assert!(share >= uni_share - 1e-9, "{share} < {uni_share}");
    let u1: Vec<f64> = base.subjects.iter().map(|s| pace_subject(&uni, s.series(0))[0]).collect();
    let m1: Vec<f64> = (0..doubled.n()).map(|i| fit.scores[(i, 0)]).collect();
    assert!(correlation(&u1, &m1).abs() > 0.99);
}

#[test]
fn two_latent_factors_give_two_components() {
    let ts = grid(11);
    let mut r = rng(10);
    let f: Vec<[f64; 2]> = (0..200).map(|_| [normal(&mut r), normal(&mut r)]).collect();
    let noise: Vec<Vec<f64>> = (0..200 * 11 * 3).map(|_| vec![0.05 * normal(&mut r)]).collect();
    let slice = multi_slice(200, 3, &ts, |i, c, t| {
        let g = (t * 10.0).round() as usize;
        let e = noise[(i * 11 + g) * 3 + c][0];
        match c {
            0 => f[i][0] + e,
            1 => f[i][1] * t + e,
            _ => f[i][0] + f[i][1] * t + e,
        }
    });
    let fit = fit_mfpca(&slice, 0.95, 0.9).unwrap();
    assert_eq!(fit.n_components, 2, "eigenvalues {:?}", fit.eigenvalues);
}

#[test]
fn projecting_training_slice_reproduces_scores() {
    let ts = grid(11);
    let slice = random_curves(11, 100, &ts, &[1.0, 0.5], &[sin1, cos1], 0.2);
    let fit = fit_mfpca(&slice, 0.9, 0.9).unwrap();
    let again = project_mfpca(&fit, &slice);
    let diff = (&again - &fit.scores).abs().max();
    assert!(diff < 1e-10, "{diff}");
}

#[test]
fn mean_trajectory_projects_near_zero() {
    let ts = grid(11);
    let slice = random_curves(12, 100, &ts, &[1.0, 0.5], &[sin1, cos1], 0.2);
    let fit = fit_mfpca(&slice, 0.9, 0.9).unwrap();
    let mean = fit.univariate[0].mean.clone();
    let one = multi_slice(1, 1, &ts, |_, _, t| mean[(t * 10.0).round() as usize]);
    let s = project_mfpca(&fit, &one);
    let scale = fit.scores.abs().max();
    assert!(s.iter().all(|v| v.abs() < 1e-6 * scale), "{s}");
}

#[test]
fn empty_slice_projects_to_empty_matrix() {
    let ts = grid(6);
    let slice = random_curves(13, 40, &ts, &[1.0], &[sin1], 0.1);
    let fit = fit_mfpca(&slice, 0.9, 0.9).unwrap();
    let empty = slice_of(vec![], 1.0);
    let s = project_mfpca(&fit, &empty);
    assert_eq!((s.nrows(), s.ncols()), (0, fit.n_components));
}

#[test]
fn reconstruction_error_decreases_with_components() {
    let ts = grid(11);
    let slice = random_curves(14, 120, &ts, &[1.0, 0.5, 0.25], &[sin1, cos1, |t| 2f64.sqrt() * (4.0 * PI * t).sin()], 0.1);
    let fit = fit_ufpca(&slice, 0, 1.0).unwrap();
    let w = &fit.weights;
    let mut prev = f64::INFINITY;
    for k in 0..=fit.n_components().min(6) {
        let mut err = 0.0;
        for s in &slice.subjects {
            let y: Vec<f64> = s.series(0).map(|(_, v)| v).collect();
            let r: Vec<f64> = y.iter().zip(&fit.mean).map(|(a, b)| a - b).collect();
            let mut recon = vec![0.0; r.len()];
            for phi in &fit.eigenfunctions[..k] {
                let c = quad(w, &r, phi);
                recon.iter_mut().zip(phi).for_each(|(x, p)| *x += c * p);
            }
            let d: Vec<f64> = r.iter().zip(&recon).map(|(a, b)| a - b).collect();
            err += quad(w, &d, &d);
        }
        assert!(err <= prev + 1e-9, "k={k}: {err} > {prev}");
        prev = err;
    }
}

fn arb_slice() -> impl Strategy<Value = LandmarkSlice> {
    (5usize..9, 15usize..40, any::<u64>()).prop_map(|(g, n, seed)| {
        let ts = grid(g);
        random_curves(seed, n, &ts, &[1.0, 0.5, 0.2], &[sin1, cos1, |t| t], 0.3)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eigenfunctions_orthonormal_and_eigenvalues_sorted(slice in arb_slice()) {
        let fit = fit_ufpca(&slice, 0, 1.0).unwrap();
        let w = &fit.weights;
        for a in 0..fit.n_components() {
            for b in 0..fit.n_components() {
                let ip = quad(w, &fit.eigenfunctions[a], &fit.eigenfunctions[b]);
                let target = if a == b { 1.0 } else { 0.0 };
                prop_assert!((ip - target).abs() < 1e-6, "<phi{a},phi{b}> = {ip}");
            }
        }
        prop_assert!(fit.all_eigenvalues.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(fit.all_eigenvalues.iter().all(|&v| v >= 0.0));
        // Sign convention.
        for phi in &fit.eigenfunctions {
            let integral: f64 = phi.iter().zip(w).map(|(p, w)| p * w).sum();
            let abs: f64 = phi.iter().zip(w).map(|(p, w)| p.abs() * w).sum();
            if integral.abs() > 1e-6 * abs {
                prop_assert!(integral > 0.0);
            }
        }
    }

    #[test]
    fn multivariate_invariants(slice in arb_slice()) {
        let fit = fit_mfpca(&slice, 0.95, 0.95).unwrap();
        prop_assert!(fit.eigenvalues.windows(2).all(|p| p[0] >= p[1] - 1e-12));
        prop_assert!(fit.eigenvalues.iter().all(|&v| v >= 0.0));
        let n = slice.n() as f64;
        for k in 0..fit.n_components {
            let mean = fit.scores.column(k).sum() / n;
            prop_assert!(mean.abs() < 1e-8, "score mean {mean}");
        }
        let again = project_mfpca(&fit, &slice);
        prop_assert!((&again - &fit.scores).abs().max() < 1e-10);
    }
}
