//! Distance measures on characteristic vectors and quantum states, the
//! Gaussian distance-to-similarity kernel, and bandwidth calibration.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hermitian::{HermitianError, QuantumState};
use crate::qcml::{QcmlError, QcmlModel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("cosine distance is undefined for zero-norm input")]
    ZeroNorm,
    #[error(transparent)]
    Hermitian(#[from] HermitianError),
    #[error(transparent)]
    Qcml(#[from] QcmlError),
    #[error("distance matrix must be symmetric with a zero diagonal and nonnegative entries: {0}")]
    BadDistanceMatrix(String),
    #[error("gamma must be strictly positive, got {0}")]
    BadGamma(f64),
    #[error("no distance samples supplied")]
    EmptySample,
    #[error("median of the squared distances is zero; states are degenerate")]
    DegenerateMedian,
}

/// Per-date symmetric similarity matrix with zero diagonal and entries in
/// [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub date: NaiveDate,
    pub firms: Vec<String>,
    values: DMatrix<f64>,
}

impl SimilarityMatrix {
    pub fn new(date: NaiveDate, firms: Vec<String>, values: DMatrix<f64>) -> Result<Self, MetricsError> {
        let j = firms.len();
        if values.nrows() != j || values.ncols() != j {
            return Err(MetricsError::LengthMismatch {
                left: j,
                right: values.nrows(),
            });
        }
        for a in 0..j {
            if values[(a, a)] != 0.0 {
                return Err(MetricsError::BadDistanceMatrix(format!(
                    "similarity diagonal must be zero at {a}"
                )));
            }
            for b in 0..j {
                let v = values[(a, b)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricsError::BadDistanceMatrix(format!(
                        "similarity ({a},{b}) = {v} outside [0, 1]"
                    )));
                }
                if (v - values[(b, a)]).abs() > 1e-12 {
                    return Err(MetricsError::BadDistanceMatrix(format!(
                        "similarity not symmetric at ({a},{b})"
                    )));
                }
            }
        }
        Ok(Self { date, firms, values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.firms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.firms.is_empty()
    }
}

/// Kernel bandwidths for the two distance families.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GammaConfig {
    pub gamma_euclidean: f64,
    pub gamma_qcml: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self {
            gamma_euclidean: 1.0,
            gamma_qcml: 16.0,
        }
    }
}

impl GammaConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.gamma_euclidean > 0.0) {
            return Err(MetricsError::BadGamma(self.gamma_euclidean));
        }
        if !(self.gamma_qcml > 0.0) {
            return Err(MetricsError::BadGamma(self.gamma_qcml));
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Euclidean distance between two characteristic vectors.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    check_len(a, b)?;
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(ss.sqrt())
}

/// Cosine distance `1 - a.b / (|a||b|)`. Undefined for zero-norm input. Kept
/// as a diagnostic comparison only; the signal pipeline never uses it because
/// norm scaling discards the magnitude information the characteristics carry.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    check_len(a, b)?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 0.0 || nb <= 0.0 {
        return Err(MetricsError::ZeroNorm);
    }
    Ok(1.0 - dot / (na * nb))
}

/// Overlap magnitude `|<a|b>|`, clamped to [0, 1] to absorb float overshoot.
fn overlap(a: &QuantumState, b: &QuantumState) -> Result<f64, MetricsError> {
    Ok(a.inner(b)?.norm().clamp(0.0, 1.0))
}

/// Bures distance `sqrt(2 - 2|<a|b>|)` between pure states; a metric with
/// range [0, sqrt(2)].
pub fn bures_distance(a: &QuantumState, b: &QuantumState) -> Result<f64, MetricsError> {
    let ov = overlap(a, b)?;
    Ok((2.0 - 2.0 * ov).max(0.0).sqrt())
}

/// Geodesic distance `arccos|<a|b>|`, range [0, pi/2].
pub fn geodesic_distance(a: &QuantumState, b: &QuantumState) -> Result<f64, MetricsError> {
    Ok(overlap(a, b)?.acos())
}

/// Gaussian kernel: off-diagonal `exp(-gamma d^2)`, zero diagonal.
pub fn similarity_matrix(
    date: NaiveDate,
    firms: Vec<String>,
    distances: &DMatrix<f64>,
    gamma: f64,
) -> Result<SimilarityMatrix, MetricsError> {
    if !(gamma > 0.0) {
        return Err(MetricsError::BadGamma(gamma));
    }
    let j = distances.nrows();
    if distances.ncols() != j || firms.len() != j {
        return Err(MetricsError::BadDistanceMatrix(format!(
            "distances are {}x{} for {} firms",
            distances.nrows(),
            distances.ncols(),
            firms.len()
        )));
    }
    for a in 0..j {
        if distances[(a, a)] != 0.0 {
            return Err(MetricsError::BadDistanceMatrix(format!(
                "nonzero diagonal at {a}"
            )));
        }
        for b in (a + 1)..j {
            let d = distances[(a, b)];
            if !d.is_finite() || d < 0.0 {
                return Err(MetricsError::BadDistanceMatrix(format!(
                    "negative or non-finite distance at ({a},{b})"
                )));
            }
            if (d - distances[(b, a)]).abs() > 1e-12 * d.abs().max(1.0) {
                return Err(MetricsError::BadDistanceMatrix(format!(
                    "asymmetric distances at ({a},{b})"
                )));
            }
        }
    }
    let values = DMatrix::from_fn(j, j, |a, b| {
        if a == b {
            0.0
        } else {
            (-gamma * distances[(a, b)] * distances[(a, b)]).exp()
        }
    });
    SimilarityMatrix::new(date, firms, values)
}

/// Median with the even-length convention: mean of the two central order
/// statistics.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Bandwidth calibration by median matching: the returned gamma makes the
/// median of `gamma * qcml_d2` equal the median of
/// `gamma_euclidean * euclid_d2`.
pub fn calibrate_gamma(euclid_d2: &[f64], qcml_d2: &[f64], gamma_euclidean: f64) -> Result<f64, MetricsError> {
    if !(gamma_euclidean > 0.0) {
        return Err(MetricsError::BadGamma(gamma_euclidean));
    }
    let me = median(euclid_d2).ok_or(MetricsError::EmptySample)?;
    let mq = median(qcml_d2).ok_or(MetricsError::EmptySample)?;
    if mq <= 0.0 {
        return Err(MetricsError::DegenerateMedian);
    }
    Ok(gamma_euclidean * me / mq)
}

/// Pairwise Euclidean distances between the rows of a firms-by-characteristics
/// slice.
pub fn pairwise_euclidean(slice: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let j = slice.nrows();
    let rows: Vec<Vec<f64>> = (0..j).map(|r| slice.row(r).iter().copied().collect()).collect();
    let mut out = DMatrix::zeros(j, j);
    for a in 0..j {
        for b in (a + 1)..j {
            let d = euclidean_distance(&rows[a], &rows[b])?;
            out[(a, b)] = d;
            out[(b, a)] = d;
        }
    }
    Ok(out)
}

/// Ground states for every row of a slice under one model: J eigensolves,
/// computed in parallel.
pub fn embed_rows(model: &QcmlModel, slice: &DMatrix<f64>) -> Result<Vec<QuantumState>, MetricsError> {
    let j = slice.nrows();
    (0..j)
        .into_par_iter()
        .map(|r| {
            let features: Vec<f64> = slice.row(r).iter().copied().collect();
            model.ground_state_of(&features).map_err(MetricsError::from)
        })
        .collect()
}

/// Pairwise Bures distances between row embeddings under one model. States
/// are computed once per row and then paired.
pub fn pairwise_qcml(model: &QcmlModel, slice: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let states = embed_rows(model, slice)?;
    let j = states.len();
    let mut out = DMatrix::zeros(j, j);
    for a in 0..j {
        for b in (a + 1)..j {
            let d = bures_distance(&states[a], &states[b])?;
            out[(a, b)] = d;
            out[(b, a)] = d;
        }
    }
    Ok(out)
}

/// Per-model pairwise distances for an ensemble; aggregation across members
/// happens downstream at the signal level.
pub fn pairwise_qcml_ensemble(
    models: &[QcmlModel],
    slice: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>, MetricsError> {
    models.iter().map(|m| pairwise_qcml(m, slice)).collect()
}
