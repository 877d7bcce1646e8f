//! Repeated stratified k-fold benchmarking of the pipelines, result
//! aggregation and export, subsampling ablations, and a joint
//! longitudinal/survival data simulator.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Cholesky, Matrix2, Vector2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::stratified_folds;
use crate::dataset::{make_landmark_slice, make_landmark_slice_allow_empty, Dataset, LandmarkMode, SubjectRecord};
use crate::metrics::{evaluate_all, MetricKind, MetricResult};
use crate::pipelines::{fit_pipeline, MethodSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid cross-validation plan: {0}")]
    InvalidPlan(String),
    #[error("landmark {landmark}: horizon {horizon} does not exceed it")]
    InvalidHorizon { landmark: f64, horizon: f64 },
    #[error("invalid simulation settings: {0}")]
    InvalidSimulation(String),
    #[error("invalid ablation: {0}")]
    InvalidAblation(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// SplitMix64 finalizer, used to derive independent job seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub k: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl CvPlan {
    pub fn new(k: usize, repetitions: usize, seed: u64) -> Self {
        Self { k, repetitions, seed }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k < 2 || self.k > n {
            return Err(HarnessError::InvalidPlan(format!("k = {} needs 2 <= k <= n = {n}", self.k)));
        }
        if self.repetitions == 0 {
            return Err(HarnessError::InvalidPlan("at least one repetition is required".into()));
        }
        Ok(())
    }

    /// Fold label of every subject, per repetition, stratified on the event
    /// indicator.
    pub fn partitions(&self, events: &[bool]) -> Vec<Vec<usize>> {
        (0..self.repetitions)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(r as u64);
                stratified_folds(events, self.k, &mut rng)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSpec {
    pub landmark: f64,
    pub horizons: Vec<f64>,
}

impl LandmarkSpec {
    /// Yearly horizons after `landmark` up to `max_horizon`.
    pub fn yearly(landmark: f64, max_horizon: f64) -> Self {
        let mut horizons = Vec::new();
        let mut t = landmark.floor() + 1.0;
        while t <= max_horizon + 1e-9 {
            horizons.push(t);
            t += 1.0;
        }
        Self { landmark, horizons }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    /// Landmarking used for training slices; validation is always strict.
    pub mode: LandmarkMode,
    /// Report mean fit seconds in the results table. Wall-clock times vary
    /// run to run, so byte-reproducible tables need this off.
    pub record_timing: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self { mode: LandmarkMode::Strict, record_timing: true }
    }
}

/// Outcome of one (repetition, fold, landmark, method) job.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRecord {
    pub repetition: usize,
    pub fold: usize,
    pub landmark: f64,
    pub method: String,
    pub outcome: std::result::Result<Vec<MetricResult>, String>,
    pub seconds: f64,
    pub n_train: usize,
    pub n_validation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub landmark: f64,
    pub horizon: Option<f64>,
    pub metric: MetricKind,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n_failed: usize,
    pub mean_fit_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub methods: Vec<String>,
    pub landmarks: Vec<f64>,
    pub rows: Vec<ResultRow>,
    pub records: Vec<FoldRecord>,
    pub record_timing: bool,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl BenchmarkResult {
    pub fn row(&self, method: &str, landmark: f64, metric: MetricKind, horizon: Option<f64>) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.landmark == landmark && r.metric == metric && r.horizon == horizon)
    }

    /// Cross-validated C index (mean over repetitions).
    pub fn cindex(&self, method: &str, landmark: f64) -> Option<f64> {
        self.row(method, landmark, MetricKind::Cindex, None).and_then(|r| r.mean)
    }

    /// Mean per-fold fit + predict seconds of successful jobs.
    pub fn mean_fit_seconds(&self, method: &str, landmark: f64) -> Option<f64> {
        let secs: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.method == method && r.landmark == landmark && r.outcome.is_ok())
            .map(|r| r.seconds)
            .collect();
        (!secs.is_empty()).then(|| secs.iter().sum::<f64>() / secs.len() as f64)
    }

    pub fn n_failed(&self, method: &str, landmark: f64) -> usize {
        self.records
            .iter()
            .filter(|r| r.method == method && r.landmark == landmark && r.outcome.is_err())
            .count()
    }

    /// (method, landmark) pairs where every fold failed.
    pub fn failed_everywhere(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for m in &self.methods {
            for &l in &self.landmarks {
                let jobs = self.records.iter().filter(|r| &r.method == m && r.landmark == l).count();
                if jobs > 0 && self.n_failed(m, l) == jobs {
                    out.push((m.clone(), l));
                }
            }
        }
        out
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from("method,landmark,horizon,metric,mean,sd,n_failed,mean_fit_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method,
                r.landmark,
                fmt_opt(r.horizon),
                r.metric,
                fmt_opt(r.mean),
                fmt_opt(r.sd),
                r.n_failed,
                fmt_opt(if self.record_timing { r.mean_fit_seconds } else { None })
            ));
        }
        out
    }

    /// Methods by landmarks table of mean per-fold seconds, plus the
    /// average across landmarks. All NA when timing is not recorded.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("method");
        for l in &self.landmarks {
            out.push_str(&format!(",{l}"));
        }
        out.push_str(",average\n");
        for m in &self.methods {
            out.push_str(m);
            let secs: Vec<Option<f64>> = self
                .landmarks
                .iter()
                .map(|&l| if self.record_timing { self.mean_fit_seconds(m, l) } else { None })
                .collect();
            for s in &secs {
                out.push_str(&format!(",{}", fmt_opt(*s)));
            }
            let known: Vec<f64> = secs.iter().flatten().copied().collect();
            let avg = (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64);
            out.push_str(&format!(",{}\n", fmt_opt(avg)));
        }
        out
    }

    pub fn failures_csv(&self) -> String {
        let mut out = String::from("repetition,fold,landmark,method,error\n");
        for r in &self.records {
            if let Err(e) = &r.outcome {
                let msg = e.replace(['\n', ','], " ");
                out.push_str(&format!("{},{},{},{},{}\n", r.repetition, r.fold, r.landmark, r.method, msg));
            }
        }
        out
    }
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt());
    (Some(mean), sd)
}

struct Job {
    repetition: usize,
    fold: usize,
    li: usize,
    mi: usize,
}

fn validate_landmarks(landmarks: &[LandmarkSpec]) -> Result<()> {
    for l in landmarks {
        if let Some(&h) = l.horizons.iter().find(|&&h| !(h > l.landmark)) {
            return Err(HarnessError::InvalidHorizon { landmark: l.landmark, horizon: h });
        }
        if l.horizons.is_empty() {
            return Err(HarnessError::InvalidPlan(format!("landmark {} has no horizons", l.landmark)));
        }
    }
    Ok(())
}

/// Cross-validated benchmark of `methods` at each landmark. Landmark slicing
/// happens per fold, after the subject-level split.
pub fn run_benchmark(
    data: &Dataset,
    methods: &[MethodSpec],
    landmarks: &[LandmarkSpec],
    plan: &CvPlan,
    opts: &BenchmarkOptions,
) -> Result<BenchmarkResult> {
    plan.validate(data.n())?;
    validate_landmarks(landmarks)?;
    let events: Vec<bool> = data.subjects.iter().map(|s| s.event).collect();
    let partitions = plan.partitions(&events);
    let mut jobs = Vec::new();
    for repetition in 0..plan.repetitions {
        for fold in 0..plan.k {
            for li in 0..landmarks.len() {
                for mi in 0..methods.len() {
                    jobs.push(Job { repetition, fold, li, mi });
                }
            }
        }
    }
    let records: Vec<FoldRecord> = jobs
        .par_iter()
        .map(|job| {
            let labels = &partitions[job.repetition];
            let train_idx: Vec<usize> = (0..data.n()).filter(|&i| labels[i] != job.fold).collect();
            let val_idx: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == job.fold).collect();
            let lm = &landmarks[job.li];
            let spec = &methods[job.mi];
            let mut record = FoldRecord {
                repetition: job.repetition,
                fold: job.fold,
                landmark: lm.landmark,
                method: spec.label.clone(),
                outcome: Err(String::new()),
                seconds: 0.0,
                n_train: 0,
                n_validation: 0,
            };
            let seed = mix_seed(&[plan.seed, spec.seed, job.repetition as u64, job.fold as u64, lm.landmark.to_bits()]);
            let spec = MethodSpec { seed, ..spec.clone() };
            let start = Instant::now();
            record.outcome = (|| {
                let train = make_landmark_slice(&data.select(&train_idx), lm.landmark, opts.mode).map_err(|e| e.to_string())?;
                let val = make_landmark_slice_allow_empty(&data.select(&val_idx), lm.landmark, LandmarkMode::Strict)
                    .map_err(|e| e.to_string())?;
                record.n_train = train.n();
                record.n_validation = val.n();
                let fitted = fit_pipeline(&spec, &train).map_err(|e| e.to_string())?;
                let pred = fitted.predict(&val, &lm.horizons).map_err(|e| e.to_string())?;
                Ok(evaluate_all(&pred, &val.times(), &val.events()))
            })();
            record.seconds = start.elapsed().as_secs_f64();
            if let Err(e) = &record.outcome {
                log::warn!("rep {} fold {} landmark {} {}: {e}", job.repetition, job.fold, lm.landmark, spec.label);
            }
            record
        })
        .collect();
    Ok(aggregate(methods, landmarks, plan.repetitions, records, opts.record_timing))
}

fn aggregate(
    methods: &[MethodSpec],
    landmarks: &[LandmarkSpec],
    repetitions: usize,
    records: Vec<FoldRecord>,
    record_timing: bool,
) -> BenchmarkResult {
    let mut result = BenchmarkResult {
        methods: methods.iter().map(|m| m.label.clone()).collect(),
        landmarks: landmarks.iter().map(|l| l.landmark).collect(),
        rows: Vec::new(),
        records,
        record_timing,
    };
    // (method, landmark bits, metric, horizon bits) -> per-repetition fold values.
    type Key = (String, u64, MetricKind, Option<u64>);
    let mut values: BTreeMap<Key, Vec<Vec<f64>>> = BTreeMap::new();
    for r in &result.records {
        let Ok(metrics) = &r.outcome else { continue };
        for m in metrics {
            if let Some(v) = m.value {
                let key = (r.method.clone(), r.landmark.to_bits(), m.metric, m.horizon.map(f64::to_bits));
                values.entry(key).or_insert_with(|| vec![Vec::new(); repetitions])[r.repetition].push(v);
            }
        }
    }
    let mut seen_labels = Vec::new();
    for m in methods {
        // Duplicate labels aggregate into one set of rows.
        if seen_labels.contains(&m.label) {
            continue;
        }
        seen_labels.push(m.label.clone());
        for l in landmarks {
            let n_failed = result.n_failed(&m.label, l.landmark);
            let secs = result.mean_fit_seconds(&m.label, l.landmark);
            let mut push = |metric: MetricKind, horizon: Option<f64>| {
                let key = (m.label.clone(), l.landmark.to_bits(), metric, horizon.map(f64::to_bits));
                let rep_means: Vec<f64> = values
                    .get(&key)
                    .map(|reps| reps.iter().filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64).collect())
                    .unwrap_or_default();
                let (mean, sd) = mean_sd(&rep_means);
                result.rows.push(ResultRow {
                    method: m.label.clone(),
                    landmark: l.landmark,
                    horizon,
                    metric,
                    mean,
                    sd,
                    n_failed,
                    mean_fit_seconds: secs,
                });
            };
            for &h in &l.horizons {
                push(MetricKind::Brier, Some(h));
                push(MetricKind::Tdauc, Some(h));
            }
            push(MetricKind::Cindex, None);
        }
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Subjects,
    Predictors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationBlock {
    pub fraction: f64,
    /// `None` when the fraction left too few subjects.
    pub result: Option<BenchmarkResult>,
}

/// Re-runs the benchmark on random subsets of subjects or covariates.
pub fn subsample_ablation(
    data: &Dataset,
    fractions: &[f64],
    axis: AblationAxis,
    methods: &[MethodSpec],
    landmarks: &[LandmarkSpec],
    plan: &CvPlan,
    opts: &BenchmarkOptions,
) -> Result<Vec<AblationBlock>> {
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(HarnessError::InvalidAblation(format!("fraction {f} outside (0, 1]")));
    }
    fractions
        .iter()
        .enumerate()
        .map(|(b, &fraction)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[plan.seed, b as u64, fraction.to_bits()]));
            let subset = if fraction == 1.0 {
                data.clone()
            } else {
                match axis {
                    AblationAxis::Subjects => {
                        let m = (fraction * data.n() as f64).round() as usize;
                        let mut idx = sample(&mut rng, data.n(), m).into_vec();
                        idx.sort_unstable();
                        data.select(&idx)
                    }
                    AblationAxis::Predictors => {
                        let pick = |rng: &mut ChaCha8Rng, total: usize, min: usize| {
                            let m = ((fraction * total as f64).round() as usize).clamp(min.min(total), total);
                            let mut idx = sample(rng, total, m).into_vec();
                            idx.sort_unstable();
                            idx
                        };
                        let baseline = pick(&mut rng, data.n_baseline(), 0);
                        let longitudinal = pick(&mut rng, data.n_longitudinal(), 1);
                        data.select_covariates(&baseline, &longitudinal)
                    }
                }
            };
            if subset.n() < 2 * plan.k {
                log::warn!("fraction {fraction} leaves {} subjects (< 2k); skipped", subset.n());
                return Ok(AblationBlock { fraction, result: None });
            }
            Ok(AblationBlock { fraction, result: Some(run_benchmark(&subset, methods, landmarks, plan, opts)?) })
        })
        .collect()
}

/// Generative settings for one longitudinal covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimCovariate {
    /// Fixed intercept and slope.
    pub beta: [f64; 2],
    /// Random-effects covariance.
    pub sigma: [[f64; 2]; 2],
    /// Measurement error variance.
    pub sigma2: f64,
    /// Log-hazard loading on the random intercept.
    pub link_intercept: f64,
    /// Log-hazard loading on the random slope.
    pub link_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub covariates: Vec<SimCovariate>,
    /// Log-hazard effects of standard normal baseline covariates.
    pub baseline_effects: Vec<f64>,
    pub visit_grid: Vec<f64>,
    pub weibull_scale: f64,
    pub weibull_shape: f64,
    /// Rate of the exponential censoring time; 0 disables censoring.
    pub censoring_rate: f64,
    /// Administrative end of follow-up, if any.
    pub max_followup: Option<f64>,
    /// Chance that any post-baseline measurement is missing.
    pub missing_prob: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 500,
            covariates: vec![
                SimCovariate {
                    beta: [0.0, 0.5],
                    sigma: [[1.0, 0.1], [0.1, 0.25]],
                    sigma2: 0.25,
                    link_intercept: 0.5,
                    link_slope: 1.0,
                };
                2
            ],
            baseline_effects: vec![0.3],
            visit_grid: vec![0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            weibull_scale: 6.0,
            weibull_shape: 1.5,
            censoring_rate: 0.05,
            max_followup: None,
            missing_prob: 0.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::InvalidSimulation(m.into()));
        if !(self.weibull_scale > 0.0 && self.weibull_shape > 0.0) {
            return bad("Weibull scale and shape must be positive");
        }
        if !(self.censoring_rate >= 0.0) {
            return bad("censoring rate must be non-negative");
        }
        if self.visit_grid.first() != Some(&0.0) || self.visit_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("visit grid must start at 0 and increase strictly");
        }
        if !(0.0..1.0).contains(&self.missing_prob) {
            return bad("missing_prob must lie in [0, 1)");
        }
        for c in &self.covariates {
            let s = Matrix2::new(c.sigma[0][0], c.sigma[0][1], c.sigma[1][0], c.sigma[1][1]);
            if c.sigma[0][1] != c.sigma[1][0] || s.symmetric_eigenvalues().min() < -1e-12 || !(c.sigma2 >= 0.0) {
                return bad("random-effects covariance must be symmetric PSD and sigma2 non-negative");
            }
        }
        Ok(())
    }

    /// Survival of the event time given a linear predictor.
    pub fn weibull_survival(&self, t: f64, eta: f64) -> f64 {
        (-(t / self.weibull_scale).powf(self.weibull_shape) * eta.exp()).exp()
    }
}

fn psd_factor(sigma: &[[f64; 2]; 2]) -> Matrix2<f64> {
    let s = Matrix2::new(sigma[0][0], sigma[0][1], sigma[1][0], sigma[1][1]);
    match Cholesky::new(s) {
        Some(c) => c.l(),
        None => {
            // Semi-definite: factor through the eigendecomposition.
            let e = s.symmetric_eigen();
            let d = Matrix2::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
            e.eigenvectors * d
        }
    }
}

/// Draws a joint longitudinal/survival dataset: mixed-model trajectories,
/// Weibull proportional-hazards event times driven by the random effects,
/// independent exponential censoring, and visits at or after the observed
/// time removed.
pub fn simulate_joint_data(config: &SimConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let factors: Vec<Matrix2<f64>> = config.covariates.iter().map(|c| psd_factor(&c.sigma)).collect();
    let censor = (config.censoring_rate > 0.0).then(|| Exp::new(config.censoring_rate).expect("positive rate"));
    let width = (config.n.max(1) as f64).log10().floor() as usize + 1;
    let mut subjects = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let x: Vec<f64> = config.baseline_effects.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
        let u: Vec<Vector2<f64>> = factors
            .iter()
            .map(|l| l * Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        let eta: f64 = config.baseline_effects.iter().zip(&x).map(|(b, x)| b * x).sum::<f64>()
            + config.covariates.iter().zip(&u).map(|(c, u)| c.link_intercept * u[0] + c.link_slope * u[1]).sum::<f64>();
        let uniform: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let event_time = config.weibull_scale * (-uniform.ln() * (-eta).exp()).powf(1.0 / config.weibull_shape);
        let mut time = event_time;
        let mut event = true;
        if let Some(c) = &censor {
            let ct: f64 = c.sample(&mut rng);
            if ct < time {
                time = ct;
                event = false;
            }
        }
        if let Some(max) = config.max_followup {
            if max < time {
                time = max;
                event = false;
            }
        }
        let mut visits = Vec::new();
        let mut longitudinal = Vec::new();
        for (v, &t) in config.visit_grid.iter().enumerate() {
            let row: Vec<f64> = config
                .covariates
                .iter()
                .zip(&u)
                .map(|(c, u)| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let missing = v > 0 && config.missing_prob > 0.0 && rng.random::<f64>() < config.missing_prob;
                    let y = c.beta[0] + u[0] + (c.beta[1] + u[1]) * t + c.sigma2.sqrt() * noise;
                    if missing { f64::NAN } else { y }
                })
                .collect();
            if t < time {
                visits.push(t);
                longitudinal.push(row);
            }
        }
        if visits.is_empty() {
            // A zero observed time leaves no valid record; redraw is not
            // needed for continuous times, but keep the subject valid.
            visits.push(0.0);
            longitudinal.push(vec![f64::NAN; config.covariates.len()]);
        }
        subjects.push(SubjectRecord {
            id: format!("S{:0width$}", i + 1),
            event_time: time,
            event,
            baseline: x,
            visits,
            longitudinal,
        });
    }
    let baseline_names = (1..=config.baseline_effects.len()).map(|j| format!("x{j}")).collect();
    let longitudinal_names = (1..=config.covariates.len()).map(|q| format!("y{q}")).collect();
    Dataset::new(subjects, baseline_names, longitudinal_names).map_err(|e| HarnessError::InvalidSimulation(e.to_string()))
}
