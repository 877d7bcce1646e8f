//! Random survival forests with log-rank splitting and Nelson–Aalen leaves.
//!
//! The same builder serves two feature sources: a fixed numeric matrix, and
//! the node-local mixed-model variant where each candidate longitudinal
//! covariate is summarized at the node by the BLUPs `(u0, u1)` of a mixed
//! model fitted to the node's members only.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{check_horizons, CoxError, SurvivalPrediction};
use crate::dataset::LandmarkSlice;
use crate::lmm::{blup_from_stats, fit_lmm_stats, fit_lmm_with_fallback, CovarianceStructure, LmmFit, SeriesStats};
use crate::survfn::{nelson_aalen_weighted, StepFunction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("invalid forest configuration: {0}")]
    InvalidConfig(String),
    #[error("features, times and events disagree in length")]
    DimensionMismatch,
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("every tree failed to grow")]
    AllTreesFailed,
    #[error(transparent)]
    Prediction(#[from] CoxError),
}

pub type Result<T> = std::result::Result<T, ForestError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Candidate variables per node; `None` means ⌈√p⌉.
    pub mtry: Option<usize>,
    /// Minimum subjects per child; later entries are tried when every
    /// candidate at a node fails.
    pub min_node_subjects: Vec<usize>,
    pub min_node_events: usize,
    pub seed: u64,
    /// Up to this many distinct values, every midpoint is a threshold;
    /// beyond it, the nine deciles are.
    pub max_split_candidates_per_feature: usize,
    /// Record every evaluated split candidate.
    pub debug: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self::funrsf()
    }
}

impl ForestConfig {
    pub fn funrsf() -> Self {
        Self {
            n_trees: 1000,
            mtry: None,
            min_node_subjects: vec![15],
            min_node_events: 0,
            seed: 1,
            max_split_candidates_per_feature: 50,
            debug: false,
        }
    }

    pub fn dynforest() -> Self {
        Self {
            n_trees: 200,
            min_node_subjects: vec![15, 30, 50],
            min_node_events: 5,
            ..Self::funrsf()
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let bad = |m: &str| Err(ForestError::InvalidConfig(m.into()));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1");
        }
        if self.min_node_subjects.is_empty() || self.min_node_subjects.contains(&0) {
            return bad("min_node_subjects must be non-empty and positive");
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > p.max(1) {
                return bad(&format!("mtry {m} outside 1..={p}"));
            }
        }
        if self.max_split_candidates_per_feature < 2 {
            return bad("max_split_candidates_per_feature must be at least 2");
        }
        Ok(())
    }

    fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p.max(1))
    }
}

/// Variable a node splits on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitVar {
    Baseline(usize),
    /// Component 0 (intercept) or 1 (slope) of the node-local BLUP.
    Blup { covariate: usize, component: usize, lmm: Box<LmmFit> },
}

impl SplitVar {
    pub fn label(&self, baseline_names: &[String], longitudinal_names: &[String]) -> String {
        match self {
            SplitVar::Baseline(j) => baseline_names.get(*j).cloned().unwrap_or_else(|| format!("x{}", j + 1)),
            SplitVar::Blup { covariate, component, .. } => {
                let name = longitudinal_names.get(*covariate).cloned().unwrap_or_else(|| format!("y{}", covariate + 1));
                format!("{name}_u{component}")
            }
        }
    }

    fn value(&self, subject: &SubjectView) -> f64 {
        match self {
            SplitVar::Baseline(j) => subject.x[*j],
            SplitVar::Blup { covariate, component, lmm } => blup_from_stats(lmm, &subject.stats[*covariate])[*component],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Leaf(StepFunction),
    Split { var: SplitVar, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    /// Bootstrap rows (with multiplicity) reaching the node.
    pub n: f64,
    pub events: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTree {
    /// Arena; the root is node 0.
    pub nodes: Vec<Node>,
    /// The root could not be split because every candidate failed.
    pub failed: bool,
}

impl SurvivalTree {
    fn leaf_for(&self, subject: &SubjectView) -> &StepFunction {
        let mut k = 0;
        loop {
            match &self.nodes[k].kind {
                NodeKind::Leaf(chf) => return chf,
                NodeKind::Split { var, threshold, left, right } => {
                    k = if var.value(subject) <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn root_split(&self) -> Option<&SplitVar> {
        match &self.nodes[0].kind {
            NodeKind::Split { var, .. } => Some(var),
            NodeKind::Leaf(_) => None,
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Leaf(_))).count()
    }
}

/// One evaluated split candidate, for audit dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub tree: usize,
    pub node: usize,
    pub variable: String,
    pub threshold: f64,
    pub statistic: f64,
    pub chosen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestFit {
    pub trees: Vec<SurvivalTree>,
    pub baseline_names: Vec<String>,
    pub longitudinal_names: Vec<String>,
    /// Out-of-bag training indices per tree.
    pub oob: Vec<Vec<usize>>,
    pub max_event_time: f64,
    pub config: ForestConfig,
    /// Nodes where the minimum-size ladder had to advance.
    pub ladder_advances: usize,
    pub split_log: Vec<SplitRecord>,
}

impl ForestFit {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Root split variable label per tree (`None` for stumps).
    pub fn root_splits(&self) -> Vec<Option<String>> {
        self.trees
            .iter()
            .map(|t| t.root_split().map(|v| v.label(&self.baseline_names, &self.longitudinal_names)))
            .collect()
    }

    /// `tree,node,variable,threshold,statistic,chosen` table.
    pub fn split_log_csv(&self) -> String {
        let mut out = String::from("tree,node,variable,threshold,statistic,chosen\n");
        for r in &self.split_log {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.tree, r.node, r.variable, r.threshold, r.statistic, r.chosen));
        }
        out
    }

    fn predict_views(&self, views: &[SubjectView], landmark: f64, horizons: &[f64]) -> Result<SurvivalPrediction> {
        check_horizons(landmark, horizons)?;
        let b = self.trees.len() as f64;
        let chf: Vec<Vec<f64>> = views
            .par_iter()
            .map(|v| {
                let mut acc = vec![0.0; horizons.len()];
                for tree in &self.trees {
                    let leaf = tree.leaf_for(v);
                    let base = leaf.eval(landmark);
                    for (a, &t) in acc.iter_mut().zip(horizons) {
                        *a += leaf.eval(t) - base;
                    }
                }
                acc.into_iter().map(|h| h / b).collect()
            })
            .collect();
        let last = horizons.len() - 1;
        Ok(SurvivalPrediction {
            landmark,
            horizons: horizons.to_vec(),
            risk_scores: chf.iter().map(|row| row[last]).collect(),
            survival: chf.iter().map(|row| row.iter().map(|h| (-h).exp()).collect()).collect(),
            extrapolated: horizons.iter().any(|&t| t > self.max_event_time),
        })
    }
}

/// What a subject offers the splitter: baseline features and per-covariate
/// longitudinal sufficient statistics.
#[derive(Debug, Clone)]
struct SubjectView {
    x: Vec<f64>,
    stats: Vec<SeriesStats>,
}

fn matrix_views(features: &DMatrix<f64>) -> Vec<SubjectView> {
    (0..features.nrows())
        .map(|i| SubjectView {
            x: features.row(i).iter().copied().collect(),
            stats: Vec::new(),
        })
        .collect()
}

fn slice_views(slice: &LandmarkSlice) -> Vec<SubjectView> {
    slice
        .subjects
        .iter()
        .map(|s| SubjectView {
            x: s.baseline.clone(),
            stats: (0..slice.n_longitudinal()).map(|q| SeriesStats::from_subject(s, q)).collect(),
        })
        .collect()
}

/// Shared, read-only training state.
struct Training<'a> {
    views: &'a [SubjectView],
    times: &'a [f64],
    events: &'a [bool],
    n_baseline: usize,
    n_longitudinal: usize,
    /// Warm starts for node-level mixed models.
    lmm_starts: Vec<Option<Vec<f64>>>,
    config: &'a ForestConfig,
    baseline_names: &'a [String],
    longitudinal_names: &'a [String],
}

/// Bootstrap row: training index and multiplicity.
#[derive(Clone, Copy)]
struct Member {
    idx: usize,
    w: f64,
}

/// Squared standardized two-sample log-rank statistic for a left/right
/// membership, members pre-sorted by increasing time.
fn logrank(members: &[Member], left: &[bool], times: &[f64], events: &[bool]) -> f64 {
    let (mut y, mut y_l) = (0.0, 0.0);
    for (m, &l) in members.iter().zip(left) {
        y += m.w;
        if l {
            y_l += m.w;
        }
    }
    let (mut u, mut v) = (0.0, 0.0);
    let mut k = 0;
    while k < members.len() {
        let t = times[members[k].idx];
        let (mut d, mut d_l, mut r, mut r_l) = (0.0, 0.0, 0.0, 0.0);
        while k < members.len() && times[members[k].idx] == t {
            let m = members[k];
            r += m.w;
            if left[k] {
                r_l += m.w;
            }
            if events[m.idx] {
                d += m.w;
                if left[k] {
                    d_l += m.w;
                }
            }
            k += 1;
        }
        if d > 0.0 && y > 1.0 {
            u += d_l - y_l * d / y;
            v += y_l * (y - y_l) * d * (y - d) / (y * y * (y - 1.0));
        }
        y -= r;
        y_l -= r_l;
    }
    if v > 1e-12 { u * u / v } else { 0.0 }
}

/// Weighted split thresholds: all midpoints when few distinct values,
/// deciles otherwise.
fn thresholds(values: &mut [(f64, f64)], max_distinct: usize) -> Vec<f64> {
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut distinct: Vec<f64> = values.iter().map(|v| v.0).collect();
    distinct.dedup();
    if distinct.len() < 2 {
        return Vec::new();
    }
    if distinct.len() <= max_distinct {
        return distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let total: f64 = values.iter().map(|v| v.1).sum();
    let mut out = Vec::with_capacity(9);
    let mut cum = 0.0;
    let mut q = 1;
    for &(x, w) in values.iter() {
        cum += w;
        while q <= 9 && cum >= total * q as f64 / 10.0 {
            out.push(x);
            q += 1;
        }
    }
    out.dedup();
    // A threshold equal to the maximum sends nothing right.
    let max = distinct[distinct.len() - 1];
    out.retain(|&c| c < max);
    out
}

struct BestSplit {
    var: SplitVar,
    threshold: f64,
    statistic: f64,
    left: Vec<Member>,
    right: Vec<Member>,
}

struct TreeBuilder<'a, 'b> {
    tr: &'b Training<'a>,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    log: Vec<SplitRecord>,
    tree_index: usize,
    ladder_advances: usize,
    root_failed: bool,
}

impl TreeBuilder<'_, '_> {
    fn leaf(&self, members: &[Member]) -> NodeKind {
        let times: Vec<f64> = members.iter().map(|m| self.tr.times[m.idx]).collect();
        let events: Vec<bool> = members.iter().map(|m| self.tr.events[m.idx]).collect();
        let w: Vec<f64> = members.iter().map(|m| m.w).collect();
        NodeKind::Leaf(nelson_aalen_weighted(&times, &events, Some(&w)))
    }

    /// Candidate split variables with their values on the node members;
    /// `None` when the candidate cannot be evaluated at this node.
    fn candidate_columns(&self, c: usize, members: &[Member]) -> Option<Vec<(SplitVar, Vec<f64>)>> {
        let tr = self.tr;
        if c < tr.n_baseline {
            let var = SplitVar::Baseline(c);
            let vals = members.iter().map(|m| tr.views[m.idx].x[c]).collect();
            return Some(vec![(var, vals)]);
        }
        let q = c - tr.n_baseline;
        let mut stats = Vec::new();
        for m in members {
            for _ in 0..m.w as usize {
                stats.push(tr.views[m.idx].stats[q]);
            }
        }
        let fit = fit_lmm_stats(&stats, CovarianceStructure::Full, tr.lmm_starts[q].as_deref()).ok()?;
        if !fit.converged {
            return None;
        }
        let blups: Vec<[f64; 2]> = members.iter().map(|m| blup_from_stats(&fit, &tr.views[m.idx].stats[q])).collect();
        let lmm = Box::new(fit);
        Some(
            (0..2)
                .map(|component| {
                    let var = SplitVar::Blup { covariate: q, component, lmm: lmm.clone() };
                    (var, blups.iter().map(|b| b[component]).collect())
                })
                .collect(),
        )
    }

    /// Best admissible split among freshly drawn candidates; the flag says
    /// whether at least one candidate could be evaluated.
    fn best_split(&mut self, members: &[Member], min_subjects: usize, node: usize) -> (Option<BestSplit>, bool) {
        let tr = self.tr;
        let p = tr.n_baseline + tr.n_longitudinal;
        let f = tr.config.mtry_for(p);
        let candidates: Vec<usize> = sample(&mut self.rng, p, f).into_vec();
        let min_events = tr.config.min_node_events as f64;
        let mut any_ok = false;
        let mut best: Option<(SplitVar, f64, f64, Vec<bool>)> = None;
        for c in candidates {
            let Some(columns) = self.candidate_columns(c, members) else {
                continue;
            };
            any_ok = true;
            for (var, vals) in columns {
                let mut weighted: Vec<(f64, f64)> = vals.iter().zip(members).map(|(&v, m)| (v, m.w)).collect();
                for cut in thresholds(&mut weighted, tr.config.max_split_candidates_per_feature) {
                    let left: Vec<bool> = vals.iter().map(|&v| v <= cut).collect();
                    let (mut n_l, mut n_r, mut e_l, mut e_r) = (0.0, 0.0, 0.0, 0.0);
                    for (m, &l) in members.iter().zip(&left) {
                        let ev = if tr.events[m.idx] { m.w } else { 0.0 };
                        if l {
                            n_l += m.w;
                            e_l += ev;
                        } else {
                            n_r += m.w;
                            e_r += ev;
                        }
                    }
                    if n_l < min_subjects as f64 || n_r < min_subjects as f64 || e_l < min_events || e_r < min_events {
                        continue;
                    }
                    let stat = logrank(members, &left, tr.times, tr.events);
                    if tr.config.debug {
                        self.log.push(SplitRecord {
                            tree: self.tree_index,
                            node,
                            variable: var.label(tr.baseline_names, tr.longitudinal_names),
                            threshold: cut,
                            statistic: stat,
                            chosen: false,
                        });
                    }
                    if stat > 0.0 && best.as_ref().map_or(true, |b| stat > b.2) {
                        best = Some((var.clone(), cut, stat, left));
                    }
                }
            }
        }
        let split = best.map(|(var, threshold, statistic, left)| {
            let (mut l, mut r) = (Vec::new(), Vec::new());
            for (m, is_left) in members.iter().zip(left) {
                if is_left { l.push(*m) } else { r.push(*m) }
            }
            BestSplit { var, threshold, statistic, left: l, right: r }
        });
        (split, any_ok)
    }

    fn grow(&mut self, members: Vec<Member>) -> usize {
        let id = self.nodes.len();
        let n: f64 = members.iter().map(|m| m.w).sum();
        let events: f64 = members.iter().filter(|m| self.tr.events[m.idx]).map(|m| m.w).sum();
        self.nodes.push(Node { kind: NodeKind::Leaf(StepFunction::constant(0.0)), n, events });
        let ladder = &self.tr.config.min_node_subjects;
        let mut split = None;
        if events > 0.0 {
            for (level, &s) in ladder.iter().enumerate() {
                if n < 2.0 * s as f64 {
                    break;
                }
                let (best, any_ok) = self.best_split(&members, s, id);
                if any_ok || level + 1 == ladder.len() {
                    if !any_ok && id == 0 {
                        self.root_failed = true;
                    }
                    split = best;
                    break;
                }
                self.ladder_advances += 1;
            }
        }
        match split {
            None => self.nodes[id].kind = self.leaf(&members),
            Some(b) => {
                if self.tr.config.debug {
                    let label = b.var.label(self.tr.baseline_names, self.tr.longitudinal_names);
                    if let Some(r) = self.log.iter_mut().rev().find(|r| {
                        r.node == id && r.variable == label && r.threshold == b.threshold && r.statistic == b.statistic
                    }) {
                        r.chosen = true;
                    }
                }
                let left = self.grow(b.left);
                let right = self.grow(b.right);
                self.nodes[id].kind = NodeKind::Split { var: b.var, threshold: b.threshold, left, right };
            }
        }
        id
    }
}

fn build_tree(tr: &Training, tree_index: usize) -> (SurvivalTree, Vec<usize>, Vec<SplitRecord>, usize) {
    let n = tr.times.len();
    let mut rng = ChaCha8Rng::seed_from_u64(tr.config.seed);
    rng.set_stream(tree_index as u64);
    let mut counts = vec![0usize; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    let oob: Vec<usize> = (0..n).filter(|&i| counts[i] == 0).collect();
    let mut members: Vec<Member> = (0..n).filter(|&i| counts[i] > 0).map(|i| Member { idx: i, w: counts[i] as f64 }).collect();
    members.sort_by(|a, b| tr.times[a.idx].total_cmp(&tr.times[b.idx]).then(a.idx.cmp(&b.idx)));
    let mut builder = TreeBuilder {
        tr,
        rng,
        nodes: Vec::new(),
        log: Vec::new(),
        tree_index,
        ladder_advances: 0,
        root_failed: false,
    };
    builder.grow(members);
    let tree = SurvivalTree { nodes: builder.nodes, failed: builder.root_failed };
    (tree, oob, builder.log, builder.ladder_advances)
}

fn fit_forest(tr: Training) -> Result<ForestFit> {
    let results: Vec<_> = (0..tr.config.n_trees).into_par_iter().map(|b| build_tree(&tr, b)).collect();
    let mut fit = ForestFit {
        trees: Vec::with_capacity(results.len()),
        baseline_names: tr.baseline_names.to_vec(),
        longitudinal_names: tr.longitudinal_names.to_vec(),
        oob: Vec::with_capacity(results.len()),
        max_event_time: tr
            .times
            .iter()
            .zip(tr.events)
            .filter(|(_, &e)| e)
            .fold(f64::NEG_INFINITY, |m, (&t, _)| m.max(t)),
        config: tr.config.clone(),
        ladder_advances: 0,
        split_log: Vec::new(),
    };
    for (tree, oob, log, advances) in results {
        fit.trees.push(tree);
        fit.oob.push(oob);
        fit.split_log.extend(log);
        fit.ladder_advances += advances;
    }
    if fit.trees.iter().all(|t| t.failed) {
        return Err(ForestError::AllTreesFailed);
    }
    Ok(fit)
}

fn check_inputs(n: usize, times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != n || events.len() != n {
        return Err(ForestError::DimensionMismatch);
    }
    if n < 2 {
        return Err(ForestError::TooFewSubjects(n));
    }
    Ok(())
}

/// Forest on a fixed numeric feature matrix.
pub fn fit_rsf(features: &DMatrix<f64>, times: &[f64], events: &[bool], config: &ForestConfig) -> Result<ForestFit> {
    check_inputs(features.nrows(), times, events)?;
    config.validate(features.ncols())?;
    let views = matrix_views(features);
    let names: Vec<String> = (0..features.ncols()).map(|j| format!("x{}", j + 1)).collect();
    fit_forest(Training {
        views: &views,
        times,
        events,
        n_baseline: features.ncols(),
        n_longitudinal: 0,
        lmm_starts: Vec::new(),
        config,
        baseline_names: &names,
        longitudinal_names: &[],
    })
}

/// Forest whose candidates are the slice's baseline covariates and its
/// longitudinal covariates, the latter summarized by node-local BLUPs.
pub fn fit_dynforest(slice: &LandmarkSlice, config: &ForestConfig) -> Result<ForestFit> {
    let times = slice.times();
    let events = slice.events();
    check_inputs(slice.n(), &times, &events)?;
    config.validate(slice.n_baseline() + slice.n_longitudinal())?;
    let views = slice_views(slice);
    let lmm_starts = (0..slice.n_longitudinal())
        .map(|q| {
            let stats: Vec<SeriesStats> = views.iter().map(|v| v.stats[q]).collect();
            fit_lmm_with_fallback(&stats)
                .ok()
                .filter(|f| f.structure == CovarianceStructure::Full)
                .map(|f| f.theta)
        })
        .collect();
    fit_forest(Training {
        views: &views,
        times: &times,
        events: &events,
        n_baseline: slice.n_baseline(),
        n_longitudinal: slice.n_longitudinal(),
        lmm_starts,
        config,
        baseline_names: &slice.baseline_names,
        longitudinal_names: &slice.longitudinal_names,
    })
}

/// Ŝ(t | ℓ) = exp(-Ĥ(t)) with Ĥ the tree-averaged CHF accumulated after ℓ.
pub fn predict_forest_survival(
    fit: &ForestFit,
    features: &DMatrix<f64>,
    landmark: f64,
    horizons: &[f64],
) -> Result<SurvivalPrediction> {
    fit.predict_views(&matrix_views(features), landmark, horizons)
}

/// Prediction for subjects carrying pre-landmark trajectories.
pub fn predict_dynforest_survival(
    fit: &ForestFit,
    newslice: &LandmarkSlice,
    horizons: &[f64],
) -> Result<SurvivalPrediction> {
    fit.predict_views(&slice_views(newslice), newslice.landmark, horizons)
}
