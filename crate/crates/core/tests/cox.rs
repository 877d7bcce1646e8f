mod common;

use common::*;
use dynsurv::cox::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Breslow partial log-likelihood written out over explicit risk sets.
fn brute_loglik(x: &[Vec<f64>], times: &[f64], events: &[bool], beta: &[f64]) -> f64 {
    let eta: Vec<f64> = x.iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let mut ll = 0.0;
    for i in 0..times.len() {
        if events[i] {
            let denom: f64 = (0..times.len()).filter(|&j| times[j] >= times[i]).map(|j| eta[j].exp()).sum();
            ll += eta[i] - denom.ln();
        }
    }
    ll
}

/// Nelson-Aalen cumulative hazard at `t`, by direct counting.
fn brute_nelson_aalen(times: &[f64], events: &[bool], t: f64) -> f64 {
    let mut distinct: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&s, _)| s).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    distinct
        .iter()
        .filter(|&&s| s <= t)
        .map(|&s| {
            let d = times.iter().zip(events).filter(|(&u, &e)| e && u == s).count() as f64;
            let y = times.iter().filter(|&&u| u >= s).count() as f64;
            d / y
        })
        .sum()
}

fn random_instance(seed: u64, n: usize, p: usize, signal: &[f64]) -> (DMatrix<f64>, Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, p, |_, _| normal(&mut r));
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let eta: f64 = signal.iter().enumerate().map(|(j, b)| b * x[(i, j)]).sum();
        let u: f64 = rand::Rng::random(&mut r);
        let t = -u.ln() / eta.exp();
        let c: f64 = -(rand::Rng::random::<f64>(&mut r)).ln() * 2.0;
        times.push(t.min(c));
        events.push(t <= c);
    }
    (x, times, events)
}

#[test]
fn binary_covariate_matches_grid_search() {
    let xs = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let times = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let events = [true, true, false, true, true, false];
    let rows: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..=100_000 {
        let b = -5.0 + 1e-4 * k as f64;
        let ll = brute_loglik(&rows, &times, &events, &[b]);
        if ll > best.0 {
            best = (ll, b);
        }
    }
    let fit = fit_cox(&DMatrix::from_column_slice(6, 1, &xs), &times, &events, 0.0).unwrap();
    assert!(fit.converged);
    assert!((fit.coefficients[0] - best.1).abs() < 1e-3, "{} vs {}", fit.coefficients[0], best.1);
    assert!((fit.loglik - best.0).abs() < 1e-6);
}

#[test]
fn huge_penalty_gives_nelson_aalen() {
    let (x, times, events) = random_instance(1, 60, 3, &[1.0, -0.5, 0.0]);
    let fit = fit_cox(&x, &times, &events, 1e8).unwrap();
    assert!(fit.std_coefficients.iter().all(|b| b.abs() < 1e-5), "{:?}", fit.std_coefficients);
    for &t in &times {
        let na = brute_nelson_aalen(&times, &events, t);
        assert!((fit.baseline.eval(t) - na).abs() < 1e-5 * (1.0 + na), "t={t}");
    }
}

#[test]
fn zero_variance_column_gets_zero_coefficient() {
    let (mut x, times, events) = random_instance(2, 40, 2, &[0.8, 0.0]);
    x.column_mut(1).fill(3.5);
    let fit = fit_cox(&x, &times, &events, 0.0).unwrap();
    assert_eq!(fit.coefficients[1], 0.0);
    assert!(fit.coefficients[0].is_finite());
}

#[test]
fn separation_raises_monotone_likelihood() {
    let x = DMatrix::from_column_slice(5, 1, &[5.0, 4.0, 3.0, 2.0, 1.0]);
    let err = fit_cox(&x, &[1.0, 2.0, 3.0, 4.0, 5.0], &[true; 5], 0.0).unwrap_err();
    assert!(matches!(err, CoxError::MonotoneLikelihood(_)), "{err:?}");
}

#[test]
fn input_errors() {
    let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
    assert_eq!(fit_cox(&x, &[1.0, 2.0, 3.0], &[false; 3], 0.0).unwrap_err(), CoxError::NoEvents);
    assert_eq!(fit_cox(&x.rows(0, 1).into_owned(), &[1.0], &[true], 0.0).unwrap_err(), CoxError::TooFewSubjects(1));
    assert_eq!(fit_cox(&x, &[1.0, 2.0], &[true; 2], 0.0).unwrap_err(), CoxError::DimensionMismatch);
}

#[test]
fn four_subject_breslow_by_hand() {
    let xs = [0.5, -1.0, 2.0, 0.0];
    let times = [1.0, 2.0, 3.0, 4.0];
    let events = [true, true, true, true];
    let x = DMatrix::from_column_slice(4, 1, &xs);
    let fit = fit_cox(&x, &times, &events, 1.0).unwrap();
    let beta = fit.coefficients[0];
    let mean = xs.iter().sum::<f64>() / 4.0;
    let w: Vec<f64> = xs.iter().map(|v| (beta * (v - mean)).exp()).collect();
    // One event per time: increment = 1 / sum of weights still at risk.
    let inc: Vec<f64> = (0..4).map(|k| 1.0 / w[k..].iter().sum::<f64>()).collect();
    let cum: Vec<f64> = inc.iter().scan(0.0, |c, v| {
        *c += v;
        Some(*c)
    }).collect();
    let got = fit.baseline_increments();
    for k in 0..4 {
        assert_eq!(got[k].0, times[k]);
        assert!((got[k].1 - inc[k]).abs() < 1e-10);
    }
    let newx = DMatrix::from_column_slice(2, 1, &[1.0, -0.3]);
    let pred = predict_conditional_survival(&fit, &newx, 1.5, &[2.5, 3.0, 10.0]).unwrap();
    let h_l = cum[0];
    for (i, &v) in [1.0, -0.3].iter().enumerate() {
        let r = (beta * (v - mean)).exp();
        for (h, &t) in [2.5, 3.0, 10.0].iter().enumerate() {
            let ht = cum[(0..4).filter(|&k| times[k] <= t).last().unwrap()];
            let expected = (-(ht - h_l) * r).exp();
            assert!((pred.survival[i][h] - expected).abs() < 1e-10);
        }
        assert!((pred.risk_scores[i] - beta * (v - mean)).abs() < 1e-12);
    }
    assert!(pred.extrapolated);
}

#[test]
fn gradient_matches_finite_differences() {
    let (x, mut times, events) = random_instance(3, 30, 3, &[0.5, -0.5, 0.2]);
    // Force some ties.
    for t in times.iter_mut().step_by(4) {
        *t = (*t * 2.0).round() / 2.0 + 0.25;
    }
    let mut r = rng(33);
    for _ in 0..10 {
        let beta: Vec<f64> = (0..3).map(|_| normal(&mut r)).collect();
        let (_, grad) = partial_loglik(&x, &times, &events, &beta);
        for j in 0..3 {
            let h = 1e-5;
            let mut up = beta.clone();
            up[j] += h;
            let mut dn = beta.clone();
            dn[j] -= h;
            let fd = (partial_loglik(&x, &times, &events, &up).0 - partial_loglik(&x, &times, &events, &dn).0) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / grad[j].abs().max(1e-3);
            assert!(rel < 1e-5, "component {j}: {} vs {fd}", grad[j]);
        }
    }
}

#[test]
fn partial_loglik_matches_explicit_risk_sets() {
    let (x, times, events) = random_instance(4, 25, 2, &[1.0, 0.0]);
    let rows: Vec<Vec<f64>> = (0..25).map(|i| x.row(i).iter().copied().collect()).collect();
    let beta = [0.3, -0.7];
    let (ll, _) = partial_loglik(&x, &times, &events, &beta);
    assert!((ll - brute_loglik(&rows, &times, &events, &beta)).abs() < 1e-10);
}

#[test]
fn rescaling_a_column_leaves_predictions_unchanged() {
    let (x, times, events) = random_instance(5, 80, 2, &[0.7, -0.4]);
    let mut scaled = x.clone();
    scaled.column_mut(0).scale_mut(12.5);
    let a = fit_cox(&x, &times, &events, 0.0).unwrap();
    let b = fit_cox(&scaled, &times, &events, 0.0).unwrap();
    assert!((b.coefficients[0] * 12.5 - a.coefficients[0]).abs() < 1e-8);
    let horizons = [0.5, 1.0, 2.0];
    let pa = predict_conditional_survival(&a, &x, 0.0, &horizons).unwrap();
    let pb = predict_conditional_survival(&b, &scaled, 0.0, &horizons).unwrap();
    for i in 0..x.nrows() {
        assert!(max_abs_diff(&pa.survival[i], &pb.survival[i]) < 1e-10);
        assert!((pa.risk_scores[i] - pb.risk_scores[i]).abs() < 1e-8);
    }
}

#[test]
fn null_model_predicts_baseline_survival() {
    let (_, times, events) = random_instance(6, 30, 1, &[0.0]);
    let x = DMatrix::from_element(30, 1, 2.0);
    let fit = fit_cox(&x, &times, &events, 0.0).unwrap();
    let horizons = [0.3, 0.8, 1.5];
    let pred = predict_conditional_survival(&fit, &x.rows(0, 3).into_owned(), 0.1, &horizons).unwrap();
    for row in &pred.survival {
        for (h, &t) in horizons.iter().enumerate() {
            let expected = (-(brute_nelson_aalen(&times, &events, t) - brute_nelson_aalen(&times, &events, 0.1))).exp();
            assert!((row[h] - expected).abs() < 1e-10);
        }
    }
}

#[test]
fn horizon_at_landmark_is_rejected() {
    let (x, times, events) = random_instance(7, 30, 1, &[0.5]);
    let fit = fit_cox(&x, &times, &events, 0.0).unwrap();
    assert!(matches!(
        predict_conditional_survival(&fit, &x, 1.0, &[1.0, 2.0]),
        Err(CoxError::InvalidHorizon { .. })
    ));
}

fn top_decile(grid: &[f64], v: f64) -> bool {
    let k = grid.iter().position(|&g| g == v).unwrap();
    k >= grid.len() - grid.len() / 10
}

#[test]
fn noise_features_select_heavy_penalty() {
    let grid = default_lambda_grid();
    let hits = (0..101)
        .filter(|&seed| {
            let (x, times, events) = random_instance(100 + seed, 150, 5, &[0.0; 5]);
            top_decile(&grid, select_ridge_penalty(&x, &times, &events, 5, &grid, seed))
        })
        .count();
    assert!(hits > 50, "{hits}/101 in top decile");
}

#[test]
fn strong_signal_selects_light_penalty() {
    let grid = default_lambda_grid();
    let hits = (0..21)
        .filter(|&seed| {
            let (x, times, events) = random_instance(200 + seed, 1000, 1, &[1.5]);
            let lambda = select_ridge_penalty(&x, &times, &events, 5, &grid, seed);
            grid.iter().position(|&g| g == lambda).unwrap() < grid.len() / 2
        })
        .count();
    assert!(hits > 10, "{hits}/21 in bottom half");
}

#[test]
fn single_value_grid_is_returned() {
    let (x, times, events) = random_instance(8, 30, 2, &[0.5, 0.5]);
    assert_eq!(select_ridge_penalty(&x, &times, &events, 5, &[0.37], 1), 0.37);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn penalty_shrinks_coefficient_norm(seed in any::<u64>()) {
        let (x, times, events) = random_instance(seed, 40, 3, &[1.0, -1.0, 0.5]);
        prop_assume!(events.iter().any(|&e| e));
        let mut prev = f64::INFINITY;
        for &lambda in &[0.01, 0.1, 1.0, 10.0, 100.0] {
            let fit = fit_cox(&x, &times, &events, lambda).unwrap();
            let norm = fit.std_coefficients.iter().map(|b| b * b).sum::<f64>().sqrt();
            prop_assert!(norm <= prev + 1e-9, "lambda {lambda}: {norm} > {prev}");
            prev = norm;
        }
    }

    #[test]
    fn predictions_are_ordered_and_bounded(seed in any::<u64>()) {
        let (x, times, events) = random_instance(seed, 50, 2, &[0.8, -0.3]);
        prop_assume!(events.iter().any(|&e| e));
        let fit = fit_cox(&x, &times, &events, 0.1).unwrap();
        let inc = fit.baseline_increments();
        prop_assert!(inc.iter().all(|&(_, d)| d >= 0.0));
        prop_assert!(inc.windows(2).all(|w| w[0].0 < w[1].0));
        let horizons = [0.2, 0.5, 1.0, 2.0, 5.0];
        let pred = predict_conditional_survival(&fit, &x, 0.1, &horizons).unwrap();
        for row in &pred.survival {
            prop_assert!(row.iter().all(|&s| (0.0..=1.0).contains(&s)));
            prop_assert!(row.windows(2).all(|w| w[1] <= w[0]));
        }
        // Curves never cross: ordering by risk score holds at every horizon.
        for a in 0..x.nrows() {
            for b in 0..x.nrows() {
                if pred.risk_scores[a] > pred.risk_scores[b] {
                    for h in 0..horizons.len() {
                        prop_assert!(pred.survival[a][h] <= pred.survival[b][h]);
                    }
                }
            }
        }
    }
}
