//! TOML run configuration.
//!
//! ```toml
//! seed = 1
//! out = "results"
//! threads = 4
//! landmark_mode = "strict"
//! record_timing = true
//!
//! [data]
//! bundled = "pbc2"            # or baseline = "...", longitudinal = "..."
//!
//! [simulation]                # used when [data] is absent
//! n = 500
//!
//! [cv]
//! folds = 5
//! repetitions = 20
//!
//! [[landmarks]]
//! landmark = 2.5
//! max_horizon = 8             # or horizons = [3, 4, 5]
//!
//! [[methods]]
//! kind = "prc"
//! ```

use std::path::{Path, PathBuf};

use dynsurv::dataset::{load_dataset, Dataset, LandmarkMode};
use dynsurv::harness::{simulate_joint_data, BenchmarkOptions, CvPlan, LandmarkSpec, SimConfig};
use dynsurv::pipelines::{MethodKind, MethodSpec};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub landmark_mode: ModeName,
    #[serde(default = "yes")]
    pub record_timing: bool,
    pub data: Option<DataSection>,
    pub simulation: Option<SimConfig>,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default)]
    pub landmarks: Vec<LandmarkEntry>,
    #[serde(default)]
    pub methods: Vec<MethodEntry>,
}

fn default_seed() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    #[default]
    Strict,
    Relaxed,
}

impl From<ModeName> for LandmarkMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Strict => LandmarkMode::Strict,
            ModeName::Relaxed => LandmarkMode::Relaxed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub bundled: Option<String>,
    pub baseline: Option<PathBuf>,
    pub longitudinal: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSection {
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
}

fn default_folds() -> usize {
    5
}

fn default_reps() -> usize {
    1
}

impl Default for CvSection {
    fn default() -> Self {
        Self { folds: default_folds(), repetitions: default_reps() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkEntry {
    pub landmark: f64,
    pub horizons: Option<Vec<f64>>,
    pub max_horizon: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub kind: String,
    pub label: Option<String>,
    pub pve1: Option<f64>,
    pub pve2: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub ridge_folds: Option<usize>,
    pub unpenalized_baseline: Option<bool>,
    pub transform: Option<bool>,
    pub grid: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub n_trees: Option<usize>,
    pub mtry: Option<usize>,
    pub min_node_subjects: Option<Vec<usize>>,
    pub min_node_events: Option<usize>,
    pub max_split_candidates_per_feature: Option<usize>,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub landmark_mode: Option<LandmarkMode>,
}

pub fn parse(text: &str) -> Result<RunConfig, String> {
    toml::from_str(text).map_err(|e| format!("invalid config: {e}"))
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(m) = o.landmark_mode {
            self.landmark_mode = match m {
                LandmarkMode::Strict => ModeName::Strict,
                LandmarkMode::Relaxed => ModeName::Relaxed,
            };
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("results"))
    }

    /// Simulation settings with the run seed applied.
    pub fn simulation_config(&self) -> Result<SimConfig, String> {
        let mut sim = self.simulation.clone().unwrap_or_default();
        sim.seed = self.seed;
        sim.validate().map_err(|e| e.to_string())?;
        Ok(sim)
    }

    pub fn methods(&self) -> Result<Vec<MethodSpec>, String> {
        if self.methods.is_empty() {
            return Err("no [[methods]] given".into());
        }
        let mut labels = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(self.methods.len());
        for m in &self.methods {
            let spec = m.to_spec(self.seed)?;
            if !labels.insert(spec.label.clone()) {
                return Err(format!("duplicate method label '{}'", spec.label));
            }
            out.push(spec);
        }
        Ok(out)
    }

    pub fn landmarks(&self) -> Result<Vec<LandmarkSpec>, String> {
        if self.landmarks.is_empty() {
            return Err("no [[landmarks]] given".into());
        }
        self.landmarks
            .iter()
            .map(|l| {
                if !(l.landmark > 0.0) {
                    return Err(format!("landmark {} must be positive", l.landmark));
                }
                let spec = match (&l.horizons, l.max_horizon) {
                    (Some(h), None) => LandmarkSpec { landmark: l.landmark, horizons: h.clone() },
                    (None, Some(m)) => LandmarkSpec::yearly(l.landmark, m),
                    _ => return Err(format!("landmark {}: give exactly one of horizons, max_horizon", l.landmark)),
                };
                if spec.horizons.is_empty() || spec.horizons.iter().any(|&h| !(h > l.landmark)) {
                    return Err(format!("landmark {}: horizons must be non-empty and exceed it", l.landmark));
                }
                Ok(spec)
            })
            .collect()
    }

    pub fn plan(&self) -> CvPlan {
        CvPlan::new(self.cv.folds, self.cv.repetitions, self.seed)
    }

    pub fn options(&self) -> BenchmarkOptions {
        BenchmarkOptions { mode: self.landmark_mode.into(), record_timing: self.record_timing }
    }

    /// Loads or simulates the benchmark data. Relative paths resolve against
    /// `base`, the directory holding the config file.
    pub fn dataset(&self, base: &Path) -> Result<Dataset, String> {
        match (&self.data, &self.simulation) {
            (Some(_), Some(_)) => Err("give either [data] or [simulation], not both".into()),
            (None, None) => Err("no [data] or [simulation] section".into()),
            (None, Some(_)) => simulate_joint_data(&self.simulation_config()?).map_err(|e| e.to_string()),
            (Some(d), None) => match (&d.bundled, &d.baseline, &d.longitudinal) {
                (Some(name), None, None) if name == "pbc2" => Ok(dynsurv::pbc2().0),
                (Some(name), None, None) => Err(format!("unknown bundled dataset '{name}'")),
                (None, Some(b), Some(l)) => {
                    let (data, report) = load_dataset(&base.join(b), &base.join(l)).map_err(|e| e.to_string())?;
                    log::info!("loaded {} subjects ({} read)", data.n(), report.n_read);
                    Ok(data)
                }
                _ => Err("[data] needs either bundled or both baseline and longitudinal".into()),
            },
        }
    }
}

impl MethodEntry {
    pub fn to_spec(&self, run_seed: u64) -> Result<MethodSpec, String> {
        let kind: MethodKind = self.kind.parse().map_err(|e: dynsurv::pipelines::PipelineError| e.to_string())?;
        let mut s = MethodSpec::new(kind);
        s.seed = run_seed;
        if let Some(v) = &self.label {
            s.label = v.clone();
        }
        if let Some(v) = self.pve1 {
            s.pve1 = v;
        }
        if let Some(v) = self.pve2 {
            s.pve2 = v;
        }
        if let Some(v) = &self.lambda_grid {
            s.lambda_grid = v.clone();
        }
        if let Some(v) = self.ridge_folds {
            s.ridge_folds = v;
        }
        if let Some(v) = self.unpenalized_baseline {
            s.unpenalized_baseline = v;
        }
        if let Some(v) = self.transform {
            s.transform = v;
        }
        if let Some(v) = &self.grid {
            s.grid = Some(v.clone());
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.n_trees {
            s.forest.n_trees = v;
        }
        if self.mtry.is_some() {
            s.forest.mtry = self.mtry;
        }
        if let Some(v) = &self.min_node_subjects {
            s.forest.min_node_subjects = v.clone();
        }
        if let Some(v) = self.min_node_events {
            s.forest.min_node_events = v;
        }
        if let Some(v) = self.max_split_candidates_per_feature {
            s.forest.max_split_candidates_per_feature = v;
        }
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    }
}
