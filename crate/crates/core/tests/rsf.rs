mod common;

use common::*;
use dynsurv::dataset::{make_landmark_slice, LandmarkMode};
use dynsurv::harness::{simulate_joint_data, SimConfig, SimCovariate};
use dynsurv::rsf::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Two Weibull populations told apart by column 0; columns 1.. are noise.
fn two_populations(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    let mut x = DMatrix::zeros(n, p);
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let group = (i % 2) as f64;
        x[(i, 0)] = group;
        for j in 1..p {
            x[(i, j)] = normal(&mut r);
        }
        let scale = if group == 1.0 { 5.0 } else { 1.0 };
        let u: f64 = r.random::<f64>();
        let t = scale * (-u.ln()).powf(1.0 / 1.5);
        let c = -(r.random::<f64>()).ln() * 6.0;
        times.push(t.min(c));
        events.push(t <= c);
    }
    (x, times, events)
}

fn config(n_trees: usize, s: usize) -> ForestConfig {
    ForestConfig { n_trees, min_node_subjects: vec![s], seed: 11, ..ForestConfig::funrsf() }
}

/// Bootstrap multiplicities drawn the way the forest documents its per-tree
/// streams: one master seed, stream = tree index, n uniform draws.
fn bootstrap_counts(seed: u64, tree: usize, n: usize) -> Vec<usize> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tree as u64);
    let mut counts = vec![0; n];
    for _ in 0..n {
        counts[r.random_range(0..n)] += 1;
    }
    counts
}

/// Weighted Nelson-Aalen at `t` by direct counting.
fn weighted_na(times: &[f64], events: &[bool], w: &[usize], t: f64) -> f64 {
    let mut ev: Vec<f64> = (0..times.len()).filter(|&i| events[i] && w[i] > 0).map(|i| times[i]).collect();
    ev.sort_by(f64::total_cmp);
    ev.dedup();
    ev.iter()
        .filter(|&&s| s <= t)
        .map(|&s| {
            let d: usize = (0..times.len()).filter(|&i| events[i] && times[i] == s).map(|i| w[i]).sum();
            let y: usize = (0..times.len()).filter(|&i| times[i] >= s).map(|i| w[i]).sum();
            d as f64 / y as f64
        })
        .sum()
}

#[test]
fn separating_feature_wins_the_root() {
    let (x, times, events) = two_populations(1, 300, 3);
    let cfg = ForestConfig { mtry: Some(3), ..config(50, 15) };
    let fit = fit_rsf(&x, &times, &events, &cfg).unwrap();
    let hits = fit.root_splits().iter().filter(|s| s.as_deref() == Some("x1")).count();
    assert!(hits as f64 >= 0.9 * 50.0, "{hits}/50");
}

#[test]
fn full_size_minimum_gives_bootstrap_nelson_aalen_stumps() {
    let (x, times, events) = two_populations(2, 40, 2);
    let cfg = config(5, 40);
    let fit = fit_rsf(&x, &times, &events, &cfg).unwrap();
    assert!(fit.trees.iter().all(|t| t.nodes.len() == 1));
    let horizons = [0.5, 1.0, 2.0, 4.0];
    let pred = predict_forest_survival(&fit, &x.rows(0, 2).into_owned(), 0.0, &horizons).unwrap();
    for (h, &t) in horizons.iter().enumerate() {
        let mean_chf = (0..5)
            .map(|b| weighted_na(&times, &events, &bootstrap_counts(cfg.seed, b, 40), t))
            .sum::<f64>()
            / 5.0;
        for row in &pred.survival {
            assert!((row[h] - (-mean_chf).exp()).abs() < 1e-12);
        }
    }
    for (b, oob) in fit.oob.iter().enumerate() {
        let counts = bootstrap_counts(cfg.seed, b, 40);
        let expected: Vec<usize> = (0..40).filter(|&i| counts[i] == 0).collect();
        assert_eq!(oob, &expected);
    }
}

#[test]
fn same_seed_same_forest() {
    let (x, times, events) = two_populations(3, 120, 4);
    let cfg = config(20, 10);
    assert_eq!(fit_rsf(&x, &times, &events, &cfg).unwrap(), fit_rsf(&x, &times, &events, &cfg).unwrap());
    let other = ForestConfig { seed: 12, ..cfg };
    assert_ne!(fit_rsf(&x, &times, &events, &other).unwrap().trees, fit_rsf(&x, &times, &events, &config(20, 10)).unwrap().trees);
}

#[test]
fn doubling_trees_changes_little() {
    let (x, times, events) = two_populations(4, 200, 3);
    // Doubling up to the default ensemble size.
    let small = fit_rsf(&x, &times, &events, &config(500, 15)).unwrap();
    let large = fit_rsf(&x, &times, &events, &config(1000, 15)).unwrap();
    assert_eq!(small.trees[..], large.trees[..500]);
    let horizons = [0.5, 1.0, 2.0, 4.0];
    let a = predict_forest_survival(&small, &x, 0.0, &horizons).unwrap();
    let b = predict_forest_survival(&large, &x, 0.0, &horizons).unwrap();
    for i in 0..x.nrows() {
        let d = max_abs_diff(&a.survival[i], &b.survival[i]);
        assert!(d < 0.05, "subject {i}: {d} {:?} {:?}", a.survival[i], b.survival[i]);
    }
}

#[test]
fn five_subject_node_by_hand() {
    let x = DMatrix::from_column_slice(5, 1, &[0.1, 0.2, 0.3, 0.4, 0.5]);
    let times = [1.0, 2.0, 3.0, 4.0, 5.0];
    let events = [true, true, false, false, false];
    // A seed whose single bootstrap draw is a permutation reproduces the sample.
    let seed = (0..10_000u64)
        .find(|&s| bootstrap_counts(s, 0, 5).iter().all(|&c| c == 1))
        .unwrap();
    let cfg = ForestConfig { n_trees: 1, min_node_subjects: vec![5], seed, ..ForestConfig::funrsf() };
    let fit = fit_rsf(&x, &times, &events, &cfg).unwrap();
    assert!(fit.oob[0].is_empty());
    let pred = predict_forest_survival(&fit, &x, 0.5, &[1.0, 2.0, 3.0]).unwrap();
    for row in &pred.survival {
        assert!((row[0] - (-0.2f64).exp()).abs() < 1e-12);
        assert!((row[1] - (-0.45f64).exp()).abs() < 1e-12);
        assert!((row[2] - (-0.45f64).exp()).abs() < 1e-12);
    }
    assert!((pred.risk_scores[0] - 0.45).abs() < 1e-12);
}

#[test]
fn bootstrap_without_events_gives_zero_hazard_tree() {
    let n = 30;
    let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
    let times: Vec<f64> = (1..=n).map(|t| t as f64).collect();
    let mut events = vec![false; n];
    events[0] = true;
    let cfg = config(40, 5);
    let fit = fit_rsf(&x, &times, &events, &cfg).unwrap();
    let mut seen = 0;
    for (b, tree) in fit.trees.iter().enumerate() {
        if bootstrap_counts(cfg.seed, b, n)[0] == 0 {
            seen += 1;
            assert_eq!(tree.nodes.len(), 1);
            match &tree.nodes[0].kind {
                NodeKind::Leaf(chf) => assert!(chf.times.is_empty() && chf.initial == 0.0),
                other => panic!("expected a leaf, got {other:?}"),
            }
        }
    }
    assert!(seen > 0);
}

#[test]
fn identical_subjects_get_identical_rows() {
    let (mut x, times, events) = two_populations(5, 100, 3);
    let row = x.row(7).into_owned();
    x.set_row(8, &row);
    let fit = fit_rsf(&x, &times, &events, &config(30, 10)).unwrap();
    let pred = predict_forest_survival(&fit, &x, 0.0, &[1.0, 2.0]).unwrap();
    assert_eq!(pred.survival[7], pred.survival[8]);
}

#[test]
fn chosen_split_has_largest_statistic() {
    let (x, times, events) = two_populations(6, 120, 3);
    let cfg = ForestConfig { debug: true, ..config(10, 10) };
    let fit = fit_rsf(&x, &times, &events, &cfg).unwrap();
    let mut by_node: HashMap<(usize, usize), Vec<&SplitRecord>> = HashMap::new();
    for r in &fit.split_log {
        by_node.entry((r.tree, r.node)).or_default().push(r);
    }
    assert!(!by_node.is_empty());
    for records in by_node.values() {
        let best = records.iter().map(|r| r.statistic).fold(f64::NEG_INFINITY, f64::max);
        let chosen: Vec<_> = records.iter().filter(|r| r.chosen).collect();
        if best > 0.0 {
            assert_eq!(chosen.len(), 1);
            assert_eq!(chosen[0].statistic, best);
        }
    }
    assert!(fit.split_log_csv().starts_with("tree,node,variable,threshold,statistic,chosen\n"));
}

#[test]
fn invalid_configs_are_rejected() {
    let (x, times, events) = two_populations(7, 20, 2);
    for cfg in [
        ForestConfig { n_trees: 0, ..config(1, 5) },
        ForestConfig { mtry: Some(3), ..config(1, 5) },
        ForestConfig { min_node_subjects: vec![], ..config(1, 5) },
        ForestConfig { min_node_subjects: vec![0], ..config(1, 5) },
    ] {
        assert!(matches!(fit_rsf(&x, &times, &events, &cfg), Err(ForestError::InvalidConfig(_))));
    }
}

fn slope_simulation(seed: u64, n: usize) -> dynsurv::dataset::Dataset {
    let active = SimCovariate { beta: [0.0, 0.5], sigma: [[1.0, 0.0], [0.0, 0.5]], sigma2: 0.1, link_intercept: 0.0, link_slope: 2.0 };
    let inert = SimCovariate { link_slope: 0.0, ..active.clone() };
    simulate_joint_data(&SimConfig {
        n,
        covariates: vec![active, inert],
        baseline_effects: vec![0.0],
        visit_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0],
        weibull_scale: 5.0,
        weibull_shape: 1.5,
        censoring_rate: 0.05,
        max_followup: None,
        missing_prob: 0.0,
        seed,
    })
    .unwrap()
}

#[test]
fn dynforest_roots_on_the_hazard_driving_slope() {
    let data = slope_simulation(8, 300);
    let slice = make_landmark_slice(&data, 2.0, LandmarkMode::Strict).unwrap();
    let cfg = ForestConfig { n_trees: 30, mtry: Some(3), min_node_subjects: vec![15], min_node_events: 4, ..ForestConfig::dynforest() };
    let fit = fit_dynforest(&slice, &cfg).unwrap();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in fit.root_splits().into_iter().flatten() {
        *counts.entry(s).or_default() += 1;
    }
    let top = counts.iter().max_by_key(|(_, &c)| c).map(|(k, _)| k.clone()).unwrap();
    assert_eq!(top, "y1_u1", "{counts:?}");
    let pred = predict_dynforest_survival(&fit, &slice, &[3.0, 4.0]).unwrap();
    assert_eq!(pred.n(), slice.n());
}

#[test]
fn dynforest_without_longitudinal_covariates_is_plain_rsf() {
    let data = slope_simulation(9, 150);
    let slice = make_landmark_slice(&data.select_covariates(&[0], &[]), 1.0, LandmarkMode::Strict).unwrap();
    assert_eq!(slice.n_longitudinal(), 0);
    let cfg = ForestConfig { n_trees: 20, min_node_subjects: vec![10], min_node_events: 0, ..ForestConfig::dynforest() };
    let a = fit_dynforest(&slice, &cfg).unwrap();
    let x = DMatrix::from_fn(slice.n(), 1, |i, _| slice.subjects[i].baseline[0]);
    let b = fit_rsf(&x, &slice.times(), &slice.events(), &cfg).unwrap();
    assert_eq!(a.trees, b.trees);
    let horizons = [2.0, 3.0];
    let pa = predict_dynforest_survival(&a, &slice, &horizons).unwrap();
    let pb = predict_forest_survival(&b, &x, slice.landmark, &horizons).unwrap();
    assert_eq!(pa.survival, pb.survival);
}

#[test]
fn event_minimum_above_total_gives_single_node_trees() {
    let data = slope_simulation(10, 80);
    let slice = make_landmark_slice(&data, 1.0, LandmarkMode::Strict).unwrap();
    let total = slice.events().iter().filter(|&&e| e).count();
    let cfg = ForestConfig { n_trees: 5, min_node_subjects: vec![5], min_node_events: total + 1, ..ForestConfig::dynforest() };
    let fit = fit_dynforest(&slice, &cfg).unwrap();
    assert!(fit.trees.iter().all(|t| t.nodes.len() == 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn out_of_bag_fraction_near_expectation(seed in any::<u64>(), n in 100usize..300) {
        let (x, times, events) = two_populations(seed, n, 2);
        let cfg = ForestConfig { seed, ..config(50, n) };
        let fit = fit_rsf(&x, &times, &events, &cfg).unwrap();
        let frac = fit.oob.iter().map(Vec::len).sum::<usize>() as f64 / (50 * n) as f64;
        prop_assert!((0.3..=0.45).contains(&frac), "{frac}");
    }

    #[test]
    fn survival_rows_monotone(seed in any::<u64>()) {
        let (x, times, events) = two_populations(seed, 80, 3);
        let cfg = ForestConfig { seed, ..config(10, 5) };
        let fit = fit_rsf(&x, &times, &events, &cfg).unwrap();
        for tree in &fit.trees {
            for node in &tree.nodes {
                if let NodeKind::Leaf(chf) = &node.kind {
                    prop_assert!(chf.increments().iter().all(|&d| d >= 0.0));
                    prop_assert!(chf.times.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
        let pred = predict_forest_survival(&fit, &x, 0.1, &[0.5, 1.0, 2.0, 5.0, 50.0]).unwrap();
        for row in &pred.survival {
            prop_assert!(row.iter().all(|&s| (0.0..=1.0).contains(&s)));
            prop_assert!(row.windows(2).all(|w| w[1] <= w[0]));
        }
        prop_assert!(pred.extrapolated);
    }
}
