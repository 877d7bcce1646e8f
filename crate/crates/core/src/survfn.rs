//! Right-continuous step functions and the counting-process estimators built
//! on them (Nelson–Aalen cumulative hazard, Kaplan–Meier survival).

use serde::{Deserialize, Serialize};

/// `f(t) = initial` for `t < times[0]`, else `values[k]` with `k` the last
/// jump at or before `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub initial: f64,
}

impl StepFunction {
    pub fn constant(value: f64) -> Self {
        Self {
            times: Vec::new(),
            values: Vec::new(),
            initial: value,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }

    /// Left limit `f(t-)`.
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Increments at each jump.
    pub fn increments(&self) -> Vec<f64> {
        let mut prev = self.initial;
        self.values
            .iter()
            .map(|&v| {
                let d = v - prev;
                prev = v;
                d
            })
            .collect()
    }
}

/// Distinct event times with event counts and (weighted) numbers at risk.
/// `weights[i]` is the multiplicity of row `i` (e.g. bootstrap count).
pub(crate) fn event_table(times: &[f64], events: &[bool], weights: Option<&[f64]>) -> Vec<(f64, f64, f64)> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut at_risk: f64 = order.iter().map(|&i| w(i)).sum();
    let mut out = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let (mut d, mut removed) = (0.0, 0.0);
        while k < order.len() && times[order[k]] == t {
            let i = order[k];
            if events[i] {
                d += w(i);
            }
            removed += w(i);
            k += 1;
        }
        if d > 0.0 {
            out.push((t, d, at_risk));
        }
        at_risk -= removed;
    }
    out
}

/// Nelson–Aalen cumulative hazard.
pub fn nelson_aalen(times: &[f64], events: &[bool]) -> StepFunction {
    nelson_aalen_weighted(times, events, None)
}

pub fn nelson_aalen_weighted(times: &[f64], events: &[bool], weights: Option<&[f64]>) -> StepFunction {
    let mut cum = 0.0;
    let mut out = StepFunction::constant(0.0);
    for (t, d, y) in event_table(times, events, weights) {
        cum += d / y;
        out.times.push(t);
        out.values.push(cum);
    }
    out
}

/// Kaplan–Meier survival estimate.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> StepFunction {
    let mut s = 1.0;
    let mut out = StepFunction::constant(1.0);
    for (t, d, y) in event_table(times, events, None) {
        s *= 1.0 - d / y;
        out.times.push(t);
        out.values.push(s);
    }
    out
}
