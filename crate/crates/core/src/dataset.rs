//! Subject-level data model, CSV ingestion, landmark slicing, grid alignment
//! and skewness-driven transformations shared by every pipeline.
//!
//! Missing longitudinal values are stored as `NaN`. Baseline covariates are
//! never missing once a [`Dataset`] has been built: subjects with missing
//! baseline information are excluded at load time.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("csv error in {file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{file} line {line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("subject {id}: duplicated visit at time {time}")]
    DuplicateVisit { id: String, time: f64 },
    #[error("subject {id} (line {line}): visit at time {time} is not before event time {event_time}")]
    VisitAfterEvent {
        id: String,
        line: usize,
        time: f64,
        event_time: f64,
    },
    #[error("subject {0} is listed twice in the baseline file")]
    DuplicateSubject(String),
    #[error("invalid subject {id}: {message}")]
    InvalidSubject { id: String, message: String },
    #[error("landmark must be positive, got {0}")]
    InvalidLandmark(f64),
    #[error("empty risk set at landmark {0}")]
    EmptyRiskSet(f64),
    #[error("grid must start at 0 and be strictly increasing")]
    InvalidGrid,
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One subject: survival outcome, baseline covariates and the longitudinal
/// measurements taken at each visit (row = visit, column = covariate).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub event_time: f64,
    pub event: bool,
    pub baseline: Vec<f64>,
    pub visits: Vec<f64>,
    pub longitudinal: Vec<Vec<f64>>,
}

impl SubjectRecord {
    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }

    /// Observed `(time, value)` pairs of one longitudinal covariate.
    pub fn series(&self, covariate: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.visits
            .iter()
            .zip(&self.longitudinal)
            .map(move |(&t, row)| (t, row[covariate]))
            .filter(|(_, y)| !y.is_nan())
    }

    /// Last non-missing value of a covariate (LOCF summary).
    pub fn last_observed(&self, covariate: usize) -> Option<f64> {
        self.longitudinal
            .iter()
            .rev()
            .map(|row| row[covariate])
            .find(|y| !y.is_nan())
    }

    fn validate(&self, p: usize, q: usize) -> Result<()> {
        let fail = |message: String| {
            Err(DatasetError::InvalidSubject {
                id: self.id.clone(),
                message,
            })
        };
        if !(self.event_time.is_finite() && self.event_time >= 0.0) {
            return fail(format!("event time {} is not a non-negative number", self.event_time));
        }
        if self.baseline.len() != p || self.baseline.iter().any(|x| !x.is_finite()) {
            return fail("baseline covariates must be complete and finite".into());
        }
        if self.visits.is_empty() || self.visits[0] != 0.0 {
            return fail("first visit must be at time 0".into());
        }
        if self.visits.windows(2).any(|w| w[0] >= w[1]) {
            return fail("visit times must be strictly increasing".into());
        }
        if let Some(&last) = self.visits.last() {
            if last >= self.event_time {
                return fail(format!(
                    "visit at {last} is not before event time {}",
                    self.event_time
                ));
            }
        }
        if self.longitudinal.len() != self.visits.len()
            || self.longitudinal.iter().any(|r| r.len() != q)
        {
            return fail("longitudinal matrix has the wrong shape".into());
        }
        if self.longitudinal[0].iter().any(|y| y.is_nan()) {
            return fail("missing longitudinal value at the baseline visit".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
    pub baseline_names: Vec<String>,
    pub longitudinal_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking every subject invariant and id uniqueness.
    pub fn new(
        subjects: Vec<SubjectRecord>,
        baseline_names: Vec<String>,
        longitudinal_names: Vec<String>,
    ) -> Result<Self> {
        let (p, q) = (baseline_names.len(), longitudinal_names.len());
        let mut seen = HashSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateSubject(s.id.clone()));
            }
            s.validate(p, q)?;
        }
        Ok(Self {
            subjects,
            baseline_names,
            longitudinal_names,
        })
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_baseline(&self) -> usize {
        self.baseline_names.len()
    }

    pub fn n_longitudinal(&self) -> usize {
        self.longitudinal_names.len()
    }

    /// Subset of subjects by position, preserving order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            baseline_names: self.baseline_names.clone(),
            longitudinal_names: self.longitudinal_names.clone(),
        }
    }

    /// Keeps only the listed baseline and longitudinal columns.
    pub fn select_covariates(&self, baseline: &[usize], longitudinal: &[usize]) -> Dataset {
        let subjects = self
            .subjects
            .iter()
            .map(|s| SubjectRecord {
                id: s.id.clone(),
                event_time: s.event_time,
                event: s.event,
                baseline: baseline.iter().map(|&j| s.baseline[j]).collect(),
                visits: s.visits.clone(),
                longitudinal: s
                    .longitudinal
                    .iter()
                    .map(|row| longitudinal.iter().map(|&q| row[q]).collect())
                    .collect(),
            })
            .collect();
        Dataset {
            subjects,
            baseline_names: baseline.iter().map(|&j| self.baseline_names[j].clone()).collect(),
            longitudinal_names: longitudinal
                .iter()
                .map(|&q| self.longitudinal_names[q].clone())
                .collect(),
        }
    }

    /// Writes the canonical two-file CSV representation.
    pub fn write_csv<W1: Write, W2: Write>(&self, baseline: W1, longitudinal: W2) -> Result<()> {
        let mut wb = csv::Writer::from_writer(baseline);
        let mut header = vec!["id".to_string(), "event_time".into(), "event_indicator".into()];
        header.extend(self.baseline_names.iter().cloned());
        wb.write_record(&header).map_err(|e| csv_err("baseline", e))?;
        for s in &self.subjects {
            let mut rec = vec![
                s.id.clone(),
                fmt_f64(s.event_time),
                if s.event { "1".into() } else { "0".into() },
            ];
            rec.extend(s.baseline.iter().map(|&x| fmt_f64(x)));
            wb.write_record(&rec).map_err(|e| csv_err("baseline", e))?;
        }
        wb.flush()?;

        let mut wl = csv::Writer::from_writer(longitudinal);
        let mut header = vec!["id".to_string(), "time".into()];
        header.extend(self.longitudinal_names.iter().cloned());
        wl.write_record(&header).map_err(|e| csv_err("longitudinal", e))?;
        for s in &self.subjects {
            for (t, row) in s.visits.iter().zip(&s.longitudinal) {
                let mut rec = vec![s.id.clone(), fmt_f64(*t)];
                rec.extend(row.iter().map(|&y| if y.is_nan() { String::new() } else { fmt_f64(y) }));
                wl.write_record(&rec).map_err(|e| csv_err("longitudinal", e))?;
            }
        }
        wl.flush()?;
        Ok(())
    }

    pub fn write_csv_files(&self, baseline: &Path, longitudinal: &Path) -> Result<()> {
        self.write_csv(
            std::fs::File::create(baseline)?,
            std::fs::File::create(longitudinal)?,
        )
    }
}

fn fmt_f64(x: f64) -> String {
    // `{}` on f64 prints the shortest representation that parses back exactly.
    format!("{x}")
}

fn csv_err(file: &str, source: csv::Error) -> DatasetError {
    DatasetError::Csv {
        file: file.to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExclusionReason {
    MissingBaselineCovariate,
    MissingBaselineVisit,
    MissingLongitudinalAtBaseline,
    NoFollowUp,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MissingBaselineCovariate => "missing baseline covariate",
            Self::MissingBaselineVisit => "no visit at time 0",
            Self::MissingLongitudinalAtBaseline => "missing longitudinal value at baseline visit",
            Self::NoFollowUp => "no follow-up after baseline",
        })
    }
}

/// Subjects dropped while loading, with the rule that excluded each one.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub n_read: usize,
    pub excluded: Vec<(String, ExclusionReason)>,
}

impl LoadReport {
    pub fn count(&self, reason: ExclusionReason) -> usize {
        self.excluded.iter().filter(|(_, r)| *r == reason).count()
    }
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "subjects read: {}", self.n_read)?;
        writeln!(f, "subjects retained: {}", self.n_read - self.excluded.len())?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (_, r) in &self.excluded {
            *counts.entry(r.to_string()).or_default() += 1;
        }
        for (reason, c) in counts {
            writeln!(f, "excluded ({reason}): {c}")?;
        }
        Ok(())
    }
}

/// Loads the two-file CSV layout from disk.
pub fn load_dataset(baseline_csv: &Path, longitudinal_csv: &Path) -> Result<(Dataset, LoadReport)> {
    load_dataset_from_readers(
        std::fs::File::open(baseline_csv)?,
        std::fs::File::open(longitudinal_csv)?,
    )
}

/// The bundled PBC2 sequential cohort (times in years, death as the event).
pub fn pbc2() -> (Dataset, LoadReport) {
    load_dataset_from_readers(
        include_str!("../data/pbc2_baseline.csv").as_bytes(),
        include_str!("../data/pbc2_longitudinal.csv").as_bytes(),
    )
    .expect("bundled PBC2 files are valid")
}

/// Loads a dataset from baseline (one row per subject) and long-format
/// longitudinal CSV readers, applying the exclusion rules.
pub fn load_dataset_from_readers<R1: Read, R2: Read>(
    baseline: R1,
    longitudinal: R2,
) -> Result<(Dataset, LoadReport)> {
    let base = read_baseline(baseline)?;
    let (long_names, mut long_rows) = read_longitudinal(longitudinal, &base.index)?;

    let mut report = LoadReport {
        n_read: base.rows.len(),
        excluded: Vec::new(),
    };
    let mut subjects = Vec::with_capacity(base.rows.len());
    for row in base.rows {
        let mut visits = long_rows.remove(&row.id).unwrap_or_default();
        visits.sort_by(|a, b| a.time.total_cmp(&b.time));
        for w in visits.windows(2) {
            if w[0].time == w[1].time {
                return Err(DatasetError::DuplicateVisit {
                    id: row.id.clone(),
                    time: w[0].time,
                });
            }
        }
        if row.event_time <= 0.0 {
            report.excluded.push((row.id, ExclusionReason::NoFollowUp));
            continue;
        }
        if let Some(v) = visits.iter().find(|v| v.time >= row.event_time) {
            return Err(DatasetError::VisitAfterEvent {
                id: row.id.clone(),
                line: v.line,
                time: v.time,
                event_time: row.event_time,
            });
        }
        let reason = if row.baseline.iter().any(|x| x.is_nan()) {
            Some(ExclusionReason::MissingBaselineCovariate)
        } else if visits.first().map_or(true, |v| v.time != 0.0) {
            Some(ExclusionReason::MissingBaselineVisit)
        } else if visits[0].values.iter().any(|y| y.is_nan()) {
            Some(ExclusionReason::MissingLongitudinalAtBaseline)
        } else {
            None
        };
        if let Some(reason) = reason {
            report.excluded.push((row.id, reason));
            continue;
        }
        subjects.push(SubjectRecord {
            id: row.id,
            event_time: row.event_time,
            event: row.event,
            baseline: row.baseline,
            visits: visits.iter().map(|v| v.time).collect(),
            longitudinal: visits.into_iter().map(|v| v.values).collect(),
        });
    }
    let dataset = Dataset::new(subjects, base.names, long_names)?;
    Ok((dataset, report))
}

struct BaselineRow {
    id: String,
    event_time: f64,
    event: bool,
    baseline: Vec<f64>,
}

struct BaselineTable {
    names: Vec<String>,
    rows: Vec<BaselineRow>,
    index: HashSet<String>,
}

fn read_baseline<R: Read>(reader: R) -> Result<BaselineTable> {
    const FILE: &str = "baseline";
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(FILE, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.len() < 3 {
        return Err(DatasetError::Malformed {
            file: FILE.into(),
            line: 1,
            message: "expected columns id,event_time,event_indicator,...".into(),
        });
    }
    let raw_names = headers[3..].to_vec();
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(FILE, e))?;
        records.push((i + 2, rec));
    }

    // A column is categorical when any non-empty cell fails to parse as a number.
    let n_raw = raw_names.len();
    let mut levels: Vec<Option<Vec<String>>> = vec![None; n_raw];
    for (j, slot) in levels.iter_mut().enumerate() {
        let cells = records.iter().map(|(_, r)| r.get(j + 3).unwrap_or(""));
        let categorical = cells.clone().any(|c| !c.is_empty() && c.parse::<f64>().is_err());
        if categorical {
            let set: BTreeSet<String> = cells.filter(|c| !c.is_empty()).map(str::to_string).collect();
            *slot = Some(set.into_iter().collect());
        }
    }
    let mut names = Vec::new();
    for (j, name) in raw_names.iter().enumerate() {
        match &levels[j] {
            None => names.push(name.clone()),
            Some(lv) => names.extend(lv.iter().skip(1).map(|l| format!("{name}_{l}"))),
        }
    }

    let mut rows = Vec::with_capacity(records.len());
    let mut index = HashSet::new();
    for (line, rec) in records {
        let malformed = |message: String| DatasetError::Malformed {
            file: FILE.into(),
            line,
            message,
        };
        if rec.len() != headers.len() {
            return Err(malformed(format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(malformed("empty subject id".into()));
        }
        if !index.insert(id.clone()) {
            return Err(DatasetError::DuplicateSubject(id));
        }
        let event_time: f64 = rec[1]
            .parse()
            .map_err(|_| malformed(format!("invalid event_time '{}'", &rec[1])))?;
        if !event_time.is_finite() || event_time < 0.0 {
            return Err(malformed(format!("event_time must be non-negative, got {event_time}")));
        }
        let event = match &rec[2] {
            "0" => false,
            "1" => true,
            other => return Err(malformed(format!("event_indicator must be 0 or 1, got '{other}'"))),
        };
        let mut baseline = Vec::with_capacity(names.len());
        for j in 0..n_raw {
            let cell = &rec[j + 3];
            match &levels[j] {
                None => baseline.push(if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse()
                        .map_err(|_| malformed(format!("invalid number '{cell}'")))?
                }),
                Some(lv) => {
                    for level in lv.iter().skip(1) {
                        baseline.push(if cell.is_empty() {
                            f64::NAN
                        } else if cell == level {
                            1.0
                        } else {
                            0.0
                        });
                    }
                }
            }
        }
        rows.push(BaselineRow {
            id,
            event_time,
            event,
            baseline,
        });
    }
    Ok(BaselineTable { names, rows, index })
}

struct VisitRow {
    line: usize,
    time: f64,
    values: Vec<f64>,
}

fn read_longitudinal<R: Read>(
    reader: R,
    known: &HashSet<String>,
) -> Result<(Vec<String>, HashMap<String, Vec<VisitRow>>)> {
    const FILE: &str = "longitudinal";
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(FILE, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.len() < 2 {
        return Err(DatasetError::Malformed {
            file: FILE.into(),
            line: 1,
            message: "expected columns id,time,...".into(),
        });
    }
    let names = headers[2..].to_vec();
    let mut out: HashMap<String, Vec<VisitRow>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(FILE, e))?;
        let malformed = |message: String| DatasetError::Malformed {
            file: FILE.into(),
            line,
            message,
        };
        if rec.len() != headers.len() {
            return Err(malformed(format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let id = rec[0].to_string();
        if !known.contains(&id) {
            return Err(malformed(format!("subject '{id}' is not in the baseline file")));
        }
        let time: f64 = rec[1]
            .parse()
            .map_err(|_| malformed(format!("invalid time '{}'", &rec[1])))?;
        if !time.is_finite() || time < 0.0 {
            return Err(malformed(format!("visit time must be non-negative, got {time}")));
        }
        let values = rec
            .iter()
            .skip(2)
            .map(|c| {
                if c.is_empty() {
                    Ok(f64::NAN)
                } else {
                    c.parse::<f64>().map_err(|_| malformed(format!("invalid number '{c}'")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.entry(id).or_default().push(VisitRow { line, time, values });
    }
    Ok((names, out))
}

/// Whether post-landmark measurements are discarded (strict) or kept (relaxed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkMode {
    #[default]
    Strict,
    Relaxed,
}

impl std::str::FromStr for LandmarkMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "strict" => Ok(Self::Strict),
            "relaxed" => Ok(Self::Relaxed),
            other => Err(format!("unknown landmark mode '{other}' (expected strict|relaxed)")),
        }
    }
}

/// The cohort at risk at a landmark with its (possibly truncated) history.
#[derive(Debug, Clone)]
pub struct LandmarkSlice {
    pub landmark: f64,
    pub mode: LandmarkMode,
    pub subjects: Vec<SubjectRecord>,
    pub baseline_names: Vec<String>,
    pub longitudinal_names: Vec<String>,
}

impl LandmarkSlice {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_baseline(&self) -> usize {
        self.baseline_names.len()
    }

    pub fn n_longitudinal(&self) -> usize {
        self.longitudinal_names.len()
    }

    pub fn risk_set_ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.event_time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.event).collect()
    }

    /// A slice over a subset of subjects (by position).
    pub fn select(&self, indices: &[usize]) -> LandmarkSlice {
        LandmarkSlice {
            landmark: self.landmark,
            mode: self.mode,
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            baseline_names: self.baseline_names.clone(),
            longitudinal_names: self.longitudinal_names.clone(),
        }
    }
}

/// Risk set at `landmark`, with visits after the landmark removed in strict
/// mode. Visits exactly at the landmark are kept.
pub fn make_landmark_slice(data: &Dataset, landmark: f64, mode: LandmarkMode) -> Result<LandmarkSlice> {
    let slice = make_landmark_slice_allow_empty(data, landmark, mode)?;
    if slice.subjects.is_empty() {
        return Err(DatasetError::EmptyRiskSet(landmark));
    }
    Ok(slice)
}

/// Like [`make_landmark_slice`] but an empty risk set is not an error
/// (used when slicing small validation folds).
pub fn make_landmark_slice_allow_empty(
    data: &Dataset,
    landmark: f64,
    mode: LandmarkMode,
) -> Result<LandmarkSlice> {
    if !(landmark > 0.0 && landmark.is_finite()) {
        return Err(DatasetError::InvalidLandmark(landmark));
    }
    let subjects = data
        .subjects
        .iter()
        .filter(|s| s.event_time > landmark)
        .map(|s| {
            let keep = match mode {
                LandmarkMode::Strict => s.visits.partition_point(|&t| t <= landmark).max(1),
                LandmarkMode::Relaxed => s.visits.len(),
            };
            SubjectRecord {
                id: s.id.clone(),
                event_time: s.event_time,
                event: s.event,
                baseline: s.baseline.clone(),
                visits: s.visits[..keep].to_vec(),
                longitudinal: s.longitudinal[..keep].to_vec(),
            }
        })
        .collect();
    Ok(LandmarkSlice {
        landmark,
        mode,
        subjects,
        baseline_names: data.baseline_names.clone(),
        longitudinal_names: data.longitudinal_names.clone(),
    })
}

/// PBC2-style schedule: baseline, 6 and 12 months, then yearly up to `max_years`.
pub fn semiannual_then_yearly_grid(max_years: f64) -> Vec<f64> {
    let mut grid = vec![0.0, 0.5];
    let mut t = 1.0;
    while t <= max_years + 1e-12 {
        grid.push(t);
        t += 1.0;
    }
    grid
}

/// Default snapping tolerance: half the smallest gap between grid points.
pub fn default_tolerance(grid: &[f64]) -> f64 {
    grid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min) / 2.0
}

/// Snaps each visit to its nearest grid point within `tolerance`; visits
/// farther away are dropped and, on collisions, the later visit wins.
/// Returns the aligned slice and the number of dropped visits.
pub fn align_to_grid(
    slice: &LandmarkSlice,
    grid: &[f64],
    tolerance: Option<f64>,
) -> Result<(LandmarkSlice, usize)> {
    if grid.first() != Some(&0.0) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DatasetError::InvalidGrid);
    }
    let tol = tolerance.unwrap_or_else(|| default_tolerance(grid));
    let mut dropped = 0;
    let subjects = slice
        .subjects
        .iter()
        .map(|s| {
            let mut snapped: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (&t, row) in s.visits.iter().zip(&s.longitudinal) {
                match nearest_grid_point(grid, t) {
                    Some(g) if (grid[g] - t).abs() <= tol => {
                        // Visits are sorted, so a later visit overwrites an earlier one.
                        if snapped.insert(g, row.clone()).is_some() {
                            dropped += 1;
                        }
                    }
                    _ => dropped += 1,
                }
            }
            SubjectRecord {
                id: s.id.clone(),
                event_time: s.event_time,
                event: s.event,
                baseline: s.baseline.clone(),
                visits: snapped.keys().map(|&g| grid[g]).collect(),
                longitudinal: snapped.into_values().collect(),
            }
        })
        .collect();
    Ok((
        LandmarkSlice {
            landmark: slice.landmark,
            mode: slice.mode,
            subjects,
            baseline_names: slice.baseline_names.clone(),
            longitudinal_names: slice.longitudinal_names.clone(),
        },
        dropped,
    ))
}

fn nearest_grid_point(grid: &[f64], t: f64) -> Option<usize> {
    let pos = grid.partition_point(|&g| g < t);
    let candidates = [pos.checked_sub(1), (pos < grid.len()).then_some(pos)];
    candidates
        .into_iter()
        .flatten()
        .min_by(|&a, &b| (grid[a] - t).abs().total_cmp(&(grid[b] - t).abs()))
}

/// Monotone transformation applied to one longitudinal covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// `ln(max(y + offset, floor))`; `floor` is the smallest shifted training value.
    Log { offset: f64, floor: f64 },
    Cubic,
}

impl Transform {
    pub fn apply(&self, y: f64) -> f64 {
        if y.is_nan() {
            return y;
        }
        match *self {
            Transform::Identity => y,
            Transform::Log { offset, floor } => (y + offset).max(floor).ln(),
            Transform::Cubic => y * y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub transforms: Vec<Transform>,
    /// Covariates that had fewer than 3 observed values when fitted.
    pub too_few_values: Vec<usize>,
}

impl TransformSpec {
    pub fn identity(q: usize) -> Self {
        Self {
            transforms: vec![Transform::Identity; q],
            too_few_values: Vec::new(),
        }
    }
}

/// Adjusted Fisher–Pearson sample skewness; `None` below three values.
pub fn sample_skewness(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let (m2, m3) = values.iter().fold((0.0, 0.0), |(m2, m3), &x| {
        let d = x - mean;
        (m2 + d * d, m3 + d * d * d)
    });
    let (m2, m3) = (m2 / nf, m3 / nf);
    if m2 <= 0.0 {
        return Some(0.0);
    }
    let g1 = m3 / m2.powf(1.5);
    Some((nf * (nf - 1.0)).sqrt() / (nf - 2.0) * g1)
}

/// Chooses log for skewness > 1, cubic for skewness < -1, identity otherwise,
/// using the pooled observed values of each covariate in `slice`.
pub fn fit_transform_spec(slice: &LandmarkSlice) -> TransformSpec {
    let q = slice.n_longitudinal();
    let mut spec = TransformSpec::identity(q);
    for c in 0..q {
        let values: Vec<f64> = slice.subjects.iter().flat_map(|s| s.series(c).map(|(_, y)| y)).collect();
        let Some(skew) = sample_skewness(&values) else {
            log::warn!(
                "covariate {} has fewer than 3 observed values; left untransformed",
                slice.longitudinal_names[c]
            );
            spec.too_few_values.push(c);
            continue;
        };
        spec.transforms[c] = if skew > 1.0 {
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let offset = if min <= 0.0 { 1.0 - min } else { 0.0 };
            Transform::Log {
                offset,
                floor: min + offset,
            }
        } else if skew < -1.0 {
            Transform::Cubic
        } else {
            Transform::Identity
        };
    }
    spec
}

pub fn apply_transform(slice: &LandmarkSlice, spec: &TransformSpec) -> LandmarkSlice {
    let mut out = slice.clone();
    for s in &mut out.subjects {
        for row in &mut s.longitudinal {
            for (y, tr) in row.iter_mut().zip(&spec.transforms) {
                *y = tr.apply(*y);
            }
        }
    }
    out
}
