#![allow(dead_code)]

use dynsurv::dataset::{Dataset, LandmarkMode, LandmarkSlice, SubjectRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn subject(id: &str, event_time: f64, event: bool, baseline: Vec<f64>, visits: Vec<f64>, long: Vec<Vec<f64>>) -> SubjectRecord {
    SubjectRecord { id: id.into(), event_time, event, baseline, visits, longitudinal: long }
}

/// Slice built directly from records (no risk-set filtering).
pub fn slice_of(subjects: Vec<SubjectRecord>, landmark: f64) -> LandmarkSlice {
    let p = subjects.first().map_or(0, |s| s.baseline.len());
    let q = subjects.first().map_or(0, |s| s.longitudinal.first().map_or(0, |r| r.len()));
    LandmarkSlice {
        landmark,
        mode: LandmarkMode::Strict,
        subjects,
        baseline_names: (1..=p).map(|j| format!("x{j}")).collect(),
        longitudinal_names: (1..=q).map(|j| format!("y{j}")).collect(),
    }
}

pub fn dataset_of(subjects: Vec<SubjectRecord>) -> Dataset {
    let s = slice_of(subjects, 1.0);
    Dataset::new(s.subjects, s.baseline_names, s.longitudinal_names).unwrap()
}

/// One-covariate slice from per-subject `(times, values)`.
pub fn series_slice(series: &[(Vec<f64>, Vec<f64>)]) -> LandmarkSlice {
    let subjects = series
        .iter()
        .enumerate()
        .map(|(i, (t, y))| {
            subject(&format!("s{i}"), 100.0, true, vec![], t.clone(), y.iter().map(|&v| vec![v]).collect())
        })
        .collect();
    slice_of(subjects, 50.0)
}

// Dense linear algebra by Gauss-Jordan elimination with partial pivoting,
// kept separate from the library's own routines.

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn identity(n: usize) -> Mat {
    let mut m = zeros(n, n);
    for i in 0..n {
        m[i][i] = 1.0;
    }
    m
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (r, k, c) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            out[i][j] = (0..k).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let mut out = zeros(a[0].len(), a.len());
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Inverse and determinant.
pub fn inverse_det(a: &Mat) -> (Mat, f64) {
    let n = a.len();
    let mut m = a.clone();
    let mut inv = identity(n);
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        if piv != col {
            m.swap(piv, col);
            inv.swap(piv, col);
            det = -det;
        }
        let d = m[col][col];
        assert!(d.abs() > 1e-300, "singular matrix");
        det *= d;
        for j in 0..n {
            m[col][j] /= d;
            inv[col][j] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = m[i][col];
                if f != 0.0 {
                    for j in 0..n {
                        m[i][j] -= f * m[col][j];
                        inv[i][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    (inv, det)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
