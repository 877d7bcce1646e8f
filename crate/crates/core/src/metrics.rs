//! Landmark-conditional IPCW Brier score, cumulative/dynamic AUC and
//! truncated concordance index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cox::SurvivalPrediction;
use crate::survfn::{kaplan_meier, StepFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Brier,
    Tdauc,
    Cindex,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Brier => "brier",
            MetricKind::Tdauc => "tdauc",
            MetricKind::Cindex => "cindex",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "brier" => Ok(MetricKind::Brier),
            "tdauc" => Ok(MetricKind::Tdauc),
            "cindex" => Ok(MetricKind::Cindex),
            other => Err(format!("unknown metric '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricKind,
    pub landmark: f64,
    pub horizon: Option<f64>,
    /// `None` when the metric is undefined on this data.
    pub value: Option<f64>,
    /// Contributing subjects (Brier, AUC) or comparable pairs (C index).
    pub n_effective: usize,
}

/// Kaplan–Meier of the censoring distribution on a landmark risk set,
/// conditioned on being uncensored at the landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoringModel {
    pub landmark: f64,
    km: StepFunction,
    at_landmark: f64,
}

impl CensoringModel {
    pub fn fit(times: &[f64], events: &[bool], landmark: f64) -> Self {
        let censored: Vec<bool> = events.iter().map(|e| !e).collect();
        let km = kaplan_meier(times, &censored);
        let at_landmark = km.eval(landmark);
        Self { landmark, km, at_landmark }
    }

    /// Ĝ(t | ℓ).
    pub fn survival(&self, t: f64) -> f64 {
        if self.at_landmark > 0.0 { self.km.eval(t) / self.at_landmark } else { 0.0 }
    }

    /// Ĝ(t⁻ | ℓ).
    pub fn survival_left(&self, t: f64) -> f64 {
        if self.at_landmark > 0.0 { self.km.eval_left(t) / self.at_landmark } else { 0.0 }
    }
}

fn horizon_index(pred: &SurvivalPrediction, horizon: f64) -> usize {
    pred.horizons
        .iter()
        .position(|&h| h == horizon)
        .unwrap_or_else(|| panic!("horizon {horizon} not among predicted horizons {:?}", pred.horizons))
}

/// IPCW Brier score at one of the predicted horizons.
pub fn brier_score(pred: &SurvivalPrediction, times: &[f64], events: &[bool], horizon: f64) -> MetricResult {
    let g = CensoringModel::fit(times, events, pred.landmark);
    brier_with(pred, times, events, horizon, &g)
}

pub fn brier_with(pred: &SurvivalPrediction, times: &[f64], events: &[bool], horizon: f64, g: &CensoringModel) -> MetricResult {
    assert_eq!(pred.n(), times.len(), "prediction and outcome sizes differ");
    let h = horizon_index(pred, horizon);
    let mut result = MetricResult {
        metric: MetricKind::Brier,
        landmark: pred.landmark,
        horizon: Some(horizon),
        value: None,
        n_effective: 0,
    };
    let n = times.len();
    let g_t = g.survival(horizon);
    if n == 0 || g_t <= 0.0 {
        return result;
    }
    let mut total = 0.0;
    for i in 0..n {
        let s = pred.survival[i][h];
        if times[i] <= horizon && events[i] {
            let w = g.survival_left(times[i]);
            if w > 0.0 {
                total += s * s / w;
                result.n_effective += 1;
            }
        } else if times[i] > horizon {
            total += (1.0 - s) * (1.0 - s) / g_t;
            result.n_effective += 1;
        }
    }
    result.value = Some(total / n as f64);
    result
}

/// Cumulative/dynamic IPCW AUC with risk 1 − Ŝ(t | ℓ).
pub fn td_auc(pred: &SurvivalPrediction, times: &[f64], events: &[bool], horizon: f64) -> MetricResult {
    let g = CensoringModel::fit(times, events, pred.landmark);
    td_auc_with(pred, times, events, horizon, &g)
}

pub fn td_auc_with(pred: &SurvivalPrediction, times: &[f64], events: &[bool], horizon: f64, g: &CensoringModel) -> MetricResult {
    assert_eq!(pred.n(), times.len(), "prediction and outcome sizes differ");
    let h = horizon_index(pred, horizon);
    let mut result = MetricResult {
        metric: MetricKind::Tdauc,
        landmark: pred.landmark,
        horizon: Some(horizon),
        value: None,
        n_effective: 0,
    };
    let mut cases: Vec<(f64, f64)> = Vec::new();
    let mut controls: Vec<f64> = Vec::new();
    for i in 0..times.len() {
        let risk = 1.0 - pred.survival[i][h];
        if times[i] <= horizon && events[i] {
            let g_i = g.survival_left(times[i]);
            if g_i > 0.0 {
                cases.push((risk, 1.0 / g_i));
            }
        } else if times[i] > horizon {
            controls.push(risk);
        }
    }
    result.n_effective = cases.len() + controls.len();
    if cases.is_empty() || controls.is_empty() || g.survival(horizon) <= 0.0 {
        return result;
    }
    // Control weights are all 1/Ĝ(t) and cancel in the ratio.
    controls.sort_by(f64::total_cmp);
    let (mut num, mut den) = (0.0, 0.0);
    for &(r, w) in &cases {
        let below = controls.partition_point(|&c| c < r);
        let tied = controls.partition_point(|&c| c <= r) - below;
        num += w * (below as f64 + 0.5 * tied as f64);
        den += w * controls.len() as f64;
    }
    result.value = Some(num / den);
    result
}

/// Concordance over comparable pairs whose earlier time is an event at or
/// before `tau`; ties in risk count one half.
pub fn c_index(pred: &SurvivalPrediction, times: &[f64], events: &[bool], tau: f64) -> MetricResult {
    assert_eq!(pred.n(), times.len(), "prediction and outcome sizes differ");
    let risk = &pred.risk_scores;
    let (mut conc, mut pairs) = (0.0, 0usize);
    for i in 0..times.len() {
        if !events[i] || times[i] > tau {
            continue;
        }
        for j in 0..times.len() {
            if times[i] < times[j] {
                pairs += 1;
                if risk[i] > risk[j] {
                    conc += 1.0;
                } else if risk[i] == risk[j] {
                    conc += 0.5;
                }
            }
        }
    }
    MetricResult {
        metric: MetricKind::Cindex,
        landmark: pred.landmark,
        horizon: None,
        value: (pairs > 0).then(|| conc / pairs as f64),
        n_effective: pairs,
    }
}

/// Brier and AUC at every predicted horizon, then the C index truncated at
/// the largest horizon.
pub fn evaluate_all(pred: &SurvivalPrediction, times: &[f64], events: &[bool]) -> Vec<MetricResult> {
    let g = CensoringModel::fit(times, events, pred.landmark);
    let mut out = Vec::with_capacity(2 * pred.horizons.len() + 1);
    for &h in &pred.horizons {
        out.push(brier_with(pred, times, events, h, &g));
        out.push(td_auc_with(pred, times, events, h, &g));
    }
    let tau = pred.horizons.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.push(c_index(pred, times, events, tau));
    out
}
