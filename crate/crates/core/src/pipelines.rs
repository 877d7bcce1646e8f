//! The six dynamic-prediction methods behind one fit/predict interface.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{
    default_lambda_grid, fit_cox_with, predict_conditional_survival, select_ridge_penalty_with, CoxError, CoxFit,
    CoxOptions, SurvivalPrediction,
};
use crate::dataset::{
    align_to_grid, apply_transform, fit_transform_spec, semiannual_then_yearly_grid, LandmarkSlice, TransformSpec,
};
use crate::lmm::{fit_lmm_with_fallback, predict_blup, slice_stats, LmmFit};
use crate::mfpca::{fit_mfpca, project_mfpca, MfpcaFit, DEFAULT_PVE};
use crate::rsf::{fit_dynforest, fit_rsf, predict_dynforest_survival, predict_forest_survival, ForestConfig, ForestFit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("invalid method specification: {0}")]
    InvalidSpec(String),
    #[error("prediction failed: {0}")]
    Predict(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Ridge used when an unpenalized Cox fit diverges.
pub const SEPARATION_RIDGE: f64 = 1e-3;
/// Ridge stabilizing MFPCCox when the feature count nears the sample size.
pub const STABILIZING_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    StaticCox,
    LocfLandmarking,
    Mfpccox,
    Prc,
    Funrsf,
    Dynforest,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::StaticCox,
        MethodKind::LocfLandmarking,
        MethodKind::Mfpccox,
        MethodKind::Prc,
        MethodKind::Funrsf,
        MethodKind::Dynforest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::StaticCox => "static_cox",
            MethodKind::LocfLandmarking => "locf_landmarking",
            MethodKind::Mfpccox => "mfpccox",
            MethodKind::Prc => "prc",
            MethodKind::Funrsf => "funrsf",
            MethodKind::Dynforest => "dynforest",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PipelineError::InvalidSpec(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Row label in result tables; defaults to the kind name.
    pub label: String,
    pub pve1: f64,
    pub pve2: f64,
    pub lambda_grid: Vec<f64>,
    pub ridge_folds: usize,
    /// Leave baseline covariates unpenalized in the ridge fit.
    pub unpenalized_baseline: bool,
    pub forest: ForestConfig,
    /// Skewness-driven log/cube transforms of longitudinal covariates.
    pub transform: bool,
    /// FPCA alignment grid; `None` means 0, 0.5, then yearly.
    pub grid: Option<Vec<f64>>,
    /// Seeds penalty selection folds and forests.
    pub seed: u64,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            label: kind.as_str().to_string(),
            pve1: DEFAULT_PVE,
            pve2: DEFAULT_PVE,
            lambda_grid: default_lambda_grid(),
            ridge_folds: 5,
            unpenalized_baseline: false,
            forest: match kind {
                MethodKind::Dynforest => ForestConfig::dynforest(),
                _ => ForestConfig::funrsf(),
            },
            transform: matches!(kind, MethodKind::Prc | MethodKind::Dynforest),
            grid: None,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidSpec(format!("{}: {m}", self.label)));
        let pve_ok = |v: f64| v > 0.0 && v <= 1.0;
        match self.kind {
            MethodKind::Mfpccox | MethodKind::Funrsf if !(pve_ok(self.pve1) && pve_ok(self.pve2)) => {
                bad(format!("PVE values ({}, {}) must lie in (0, 1]", self.pve1, self.pve2))
            }
            MethodKind::Prc if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l >= 0.0)) => {
                bad("lambda grid must be non-empty and non-negative".into())
            }
            MethodKind::Prc if self.lambda_grid.len() > 1 && self.ridge_folds < 3 => {
                bad(format!("ridge_folds {} must be at least 3", self.ridge_folds))
            }
            MethodKind::Funrsf | MethodKind::Dynforest if self.forest.n_trees == 0 => bad("n_trees must be at least 1".into()),
            _ => match &self.grid {
                Some(g) if g.first() != Some(&0.0) || g.windows(2).any(|w| w[0] >= w[1]) => {
                    bad("grid must start at 0 and increase strictly".into())
                }
                _ => Ok(()),
            },
        }
    }
}

/// Frozen longitudinal summarizer.
#[derive(Debug, Clone)]
pub enum Summarizer {
    None,
    Lmm(Vec<Option<LmmFit>>),
    Mfpca { fit: Box<MfpcaFit>, grid: Vec<f64> },
}

#[derive(Debug, Clone)]
pub enum SurvivalModel {
    Cox(CoxFit),
    Forest(Box<ForestFit>),
}

#[derive(Debug, Clone)]
pub struct FittedPipeline {
    pub spec: MethodSpec,
    pub landmark: f64,
    pub transform: Option<TransformSpec>,
    pub summarizer: Summarizer,
    pub model: SurvivalModel,
    pub feature_names: Vec<String>,
    /// Human-readable remarks about fallbacks taken during fitting.
    pub notes: Vec<String>,
}

fn fail<E: fmt::Display>(e: E) -> PipelineError {
    PipelineError::FitFailed(e.to_string())
}

fn baseline_matrix(slice: &LandmarkSlice, extra: usize) -> DMatrix<f64> {
    let p = slice.n_baseline();
    let mut x = DMatrix::zeros(slice.n(), p + extra);
    for (i, s) in slice.subjects.iter().enumerate() {
        for j in 0..p {
            x[(i, j)] = s.baseline[j];
        }
    }
    x
}

/// `[x, y(0)]` or `[x, y_last]`.
fn value_features(slice: &LandmarkSlice, last: bool) -> DMatrix<f64> {
    let (p, q) = (slice.n_baseline(), slice.n_longitudinal());
    let mut x = baseline_matrix(slice, q);
    for (i, s) in slice.subjects.iter().enumerate() {
        for c in 0..q {
            x[(i, p + c)] = if last { s.last_observed(c).unwrap_or(f64::NAN) } else { s.longitudinal[0][c] };
        }
    }
    x
}

fn blup_features(slice: &LandmarkSlice, fits: &[Option<LmmFit>]) -> DMatrix<f64> {
    let p = slice.n_baseline();
    let mut x = baseline_matrix(slice, 2 * fits.len());
    for (c, fit) in fits.iter().enumerate() {
        let Some(fit) = fit else { continue };
        for (i, u) in predict_blup(fit, slice, c).effects.iter().enumerate() {
            x[(i, p + 2 * c)] = u[0];
            x[(i, p + 2 * c + 1)] = u[1];
        }
    }
    x
}

fn score_features(slice: &LandmarkSlice, scores: &DMatrix<f64>) -> DMatrix<f64> {
    let p = slice.n_baseline();
    let mut x = baseline_matrix(slice, scores.ncols());
    x.view_mut((0, p), (scores.nrows(), scores.ncols())).copy_from(scores);
    x
}

/// Unpenalized Cox fit retried with a small ridge on separation.
fn fit_cox_retrying(x: &DMatrix<f64>, times: &[f64], events: &[bool], penalty: f64, notes: &mut Vec<String>) -> Result<CoxFit> {
    match fit_cox_with(x, times, events, &CoxOptions::ridge(penalty), None) {
        Err(CoxError::MonotoneLikelihood(m)) if penalty < SEPARATION_RIDGE => {
            notes.push(format!("monotone likelihood ({m}); refitted with ridge {SEPARATION_RIDGE}"));
            fit_cox_with(x, times, events, &CoxOptions::ridge(SEPARATION_RIDGE), None).map_err(fail)
        }
        other => other.map_err(fail),
    }
}

fn alignment_grid(spec: &MethodSpec, slice: &LandmarkSlice) -> Vec<f64> {
    spec.grid.clone().unwrap_or_else(|| {
        let max_visit = slice
            .subjects
            .iter()
            .filter_map(|s| s.visits.last().copied())
            .fold(slice.landmark, f64::max);
        semiannual_then_yearly_grid(max_visit)
    })
}

fn fit_mfpca_step(spec: &MethodSpec, train: &LandmarkSlice) -> Result<(MfpcaFit, Vec<f64>)> {
    let grid = alignment_grid(spec, train);
    let (aligned, _) = align_to_grid(train, &grid, None).map_err(fail)?;
    let fit = fit_mfpca(&aligned, spec.pve1, spec.pve2).map_err(fail)?;
    Ok((fit, grid))
}

fn names_with(slice: &LandmarkSlice, extra: impl IntoIterator<Item = String>) -> Vec<String> {
    slice.baseline_names.iter().cloned().chain(extra).collect()
}

pub fn fit_static_cox(train: &LandmarkSlice) -> Result<FittedPipeline> {
    fit_pipeline(&MethodSpec::new(MethodKind::StaticCox), train)
}

pub fn fit_locf(train: &LandmarkSlice) -> Result<FittedPipeline> {
    fit_pipeline(&MethodSpec::new(MethodKind::LocfLandmarking), train)
}

pub fn fit_mfpccox(train: &LandmarkSlice, pve1: f64, pve2: f64) -> Result<FittedPipeline> {
    fit_pipeline(&MethodSpec { pve1, pve2, ..MethodSpec::new(MethodKind::Mfpccox) }, train)
}

pub fn fit_prc(train: &LandmarkSlice, lambda_grid: &[f64]) -> Result<FittedPipeline> {
    fit_pipeline(&MethodSpec { lambda_grid: lambda_grid.to_vec(), ..MethodSpec::new(MethodKind::Prc) }, train)
}

pub fn fit_funrsf(train: &LandmarkSlice, pve1: f64, pve2: f64, forest: &ForestConfig) -> Result<FittedPipeline> {
    fit_pipeline(&MethodSpec { pve1, pve2, forest: forest.clone(), ..MethodSpec::new(MethodKind::Funrsf) }, train)
}

pub fn fit_dynforest_pipeline(train: &LandmarkSlice, forest: &ForestConfig) -> Result<FittedPipeline> {
    fit_pipeline(&MethodSpec { forest: forest.clone(), ..MethodSpec::new(MethodKind::Dynforest) }, train)
}

/// Fits any method on a training landmark slice.
pub fn fit_pipeline(spec: &MethodSpec, train: &LandmarkSlice) -> Result<FittedPipeline> {
    spec.validate()?;
    let times = train.times();
    let events = train.events();
    let mut notes = Vec::new();
    let (transform, work) = if spec.transform {
        let t = fit_transform_spec(train);
        let w = apply_transform(train, &t);
        (Some(t), w)
    } else {
        (None, train.clone())
    };
    let lnames = &train.longitudinal_names;
    let (summarizer, model, feature_names) = match spec.kind {
        MethodKind::StaticCox | MethodKind::LocfLandmarking => {
            let last = spec.kind == MethodKind::LocfLandmarking;
            let x = value_features(&work, last);
            let fit = fit_cox_retrying(&x, &times, &events, 0.0, &mut notes)?;
            let suffix = if last { "last" } else { "0" };
            let names = names_with(train, lnames.iter().map(|n| format!("{n}_{suffix}")));
            (Summarizer::None, SurvivalModel::Cox(fit), names)
        }
        MethodKind::Mfpccox | MethodKind::Funrsf => {
            let (mfpca, grid) = fit_mfpca_step(spec, &work)?;
            if !mfpca.dropped_covariates.is_empty() {
                notes.push(format!("{} covariate(s) dropped from MFPCA", mfpca.dropped_covariates.len()));
            }
            let x = score_features(&work, &mfpca.scores);
            let names = names_with(train, (1..=mfpca.n_components).map(|k| format!("rho_{k}")));
            let model = if spec.kind == MethodKind::Mfpccox {
                let penalty = if 2 * x.ncols() > x.nrows() {
                    notes.push(format!("feature count near sample size; ridge {STABILIZING_RIDGE}"));
                    STABILIZING_RIDGE
                } else {
                    0.0
                };
                SurvivalModel::Cox(fit_cox_retrying(&x, &times, &events, penalty, &mut notes)?)
            } else {
                let forest = ForestConfig { seed: spec.seed, ..spec.forest.clone() };
                SurvivalModel::Forest(Box::new(fit_rsf(&x, &times, &events, &forest).map_err(fail)?))
            };
            (Summarizer::Mfpca { fit: Box::new(mfpca), grid }, model, names)
        }
        MethodKind::Prc => {
            let q = work.n_longitudinal();
            let fits: Vec<Option<LmmFit>> = (0..q)
                .map(|c| match fit_lmm_with_fallback(&slice_stats(&work, c)) {
                    Ok(f) => Some(f),
                    Err(e) => {
                        notes.push(format!("mixed model for {} failed: {e}", lnames[c]));
                        None
                    }
                })
                .collect();
            let failed = fits.iter().filter(|f| f.is_none()).count();
            if q > 0 && 2 * failed >= q {
                return Err(PipelineError::FitFailed(format!("{failed} of {q} mixed models not estimable")));
            }
            let x = blup_features(&work, &fits);
            let p = work.n_baseline();
            let mask: Vec<bool> = (0..x.ncols()).map(|j| !(spec.unpenalized_baseline && j < p)).collect();
            let lambda = select_ridge_penalty_with(&x, &times, &events, spec.ridge_folds, &spec.lambda_grid, spec.seed, Some(&mask));
            let opts = CoxOptions { penalty: lambda, penalized: Some(mask), ..Default::default() };
            let fit = match fit_cox_with(&x, &times, &events, &opts, None) {
                Err(CoxError::MonotoneLikelihood(m)) if lambda < SEPARATION_RIDGE => {
                    notes.push(format!("monotone likelihood ({m}); refitted with ridge {SEPARATION_RIDGE}"));
                    fit_cox_with(&x, &times, &events, &CoxOptions { penalty: SEPARATION_RIDGE, ..opts }, None).map_err(fail)?
                }
                other => other.map_err(fail)?,
            };
            let names = names_with(train, lnames.iter().flat_map(|n| [format!("{n}_u0"), format!("{n}_u1")]));
            (Summarizer::Lmm(fits), SurvivalModel::Cox(fit), names)
        }
        MethodKind::Dynforest => {
            let forest = ForestConfig { seed: spec.seed, ..spec.forest.clone() };
            let fit = fit_dynforest(&work, &forest).map_err(fail)?;
            if fit.ladder_advances > 0 {
                notes.push(format!("minimum node size ladder advanced at {} node(s)", fit.ladder_advances));
            }
            (Summarizer::None, SurvivalModel::Forest(Box::new(fit)), names_with(train, lnames.iter().cloned()))
        }
    };
    Ok(FittedPipeline {
        spec: spec.clone(),
        landmark: train.landmark,
        transform,
        summarizer,
        model,
        feature_names,
        notes,
    })
}

impl FittedPipeline {
    pub fn kind(&self) -> MethodKind {
        self.spec.kind
    }

    /// Feature matrix of new subjects built only from frozen artifacts.
    pub fn features(&self, slice: &LandmarkSlice) -> Result<Option<DMatrix<f64>>> {
        let work = self.prepare(slice);
        Ok(match (&self.spec.kind, &self.summarizer) {
            (MethodKind::StaticCox, _) => Some(value_features(&work, false)),
            (MethodKind::LocfLandmarking, _) => Some(value_features(&work, true)),
            (_, Summarizer::Lmm(fits)) => Some(blup_features(&work, fits)),
            (_, Summarizer::Mfpca { fit, grid }) => {
                let (aligned, _) = align_to_grid(&work, grid, None).map_err(|e| PipelineError::Predict(e.to_string()))?;
                Some(score_features(&work, &project_mfpca(fit, &aligned)))
            }
            _ => None,
        })
    }

    fn prepare(&self, slice: &LandmarkSlice) -> LandmarkSlice {
        match &self.transform {
            Some(t) => apply_transform(slice, t),
            None => slice.clone(),
        }
    }

    /// Conditional survival of the subjects of `slice` (a slice at this
    /// pipeline's landmark) at each horizon.
    pub fn predict(&self, slice: &LandmarkSlice, horizons: &[f64]) -> Result<SurvivalPrediction> {
        let perr = |e: &dyn fmt::Display| PipelineError::Predict(e.to_string());
        match &self.model {
            SurvivalModel::Cox(fit) => {
                let x = self.features(slice)?.expect("Cox pipelines have features");
                predict_conditional_survival(fit, &x, slice.landmark, horizons).map_err(|e| perr(&e))
            }
            SurvivalModel::Forest(fit) => match self.features(slice)? {
                Some(x) => predict_forest_survival(fit, &x, slice.landmark, horizons).map_err(|e| perr(&e)),
                None => predict_dynforest_survival(fit, &self.prepare(slice), horizons).map_err(|e| perr(&e)),
            },
        }
    }

    /// Writes audit artifacts into `dir` and returns the files written.
    pub fn export_artifacts(&self, dir: &Path, train: &LandmarkSlice) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, body: String| -> std::io::Result<()> {
            let path = dir.join(name);
            fs::write(&path, body)?;
            written.push(path);
            Ok(())
        };
        let mut summary = format!("method = {}\nlandmark = {}\n", self.spec.label, self.landmark);
        if let Some(t) = &self.transform {
            for (name, tr) in train.longitudinal_names.iter().zip(&t.transforms) {
                summary.push_str(&format!("transform.{name} = {tr:?}\n"));
            }
        }
        for n in &self.notes {
            summary.push_str(&format!("note = {n}\n"));
        }
        put("summary.txt", summary)?;
        match &self.model {
            SurvivalModel::Cox(fit) => {
                put("coefficients.csv", fit.coefficients_csv(&self.feature_names))?;
                put("baseline_hazard.csv", fit.baseline_csv())?;
            }
            SurvivalModel::Forest(fit) => {
                let mut roots = String::from("tree,root_split\n");
                for (b, r) in fit.root_splits().iter().enumerate() {
                    roots.push_str(&format!("{b},{}\n", r.as_deref().unwrap_or("")));
                }
                put("root_splits.csv", roots)?;
                if fit.config.debug {
                    put("splits.csv", fit.split_log_csv())?;
                }
            }
        }
        match &self.summarizer {
            Summarizer::None => {}
            Summarizer::Lmm(fits) => {
                let work = self.prepare(train);
                let mut models = String::new();
                let mut blups = String::from("id,covariate,u0,u1\n");
                for (c, fit) in fits.iter().enumerate() {
                    let name = &train.longitudinal_names[c];
                    let Some(fit) = fit else { continue };
                    models.push_str(&format!("[{name}]\n{}\n", fit.to_kv()));
                    let re = predict_blup(fit, &work, c);
                    for (id, u) in re.ids.iter().zip(&re.effects) {
                        blups.push_str(&format!("{id},{name},{},{}\n", u[0], u[1]));
                    }
                }
                put("mixed_models.txt", models)?;
                put("blups.csv", blups)?;
            }
            Summarizer::Mfpca { fit, .. } => {
                put("eigenfunctions.csv", fit.eigenfunctions_csv(&train.longitudinal_names))?;
            }
        }
        Ok(written)
    }
}
