//! Functional connectivity networks: Pearson FCN construction, sliding-window
//! augmentation and the thresholded, renormalized graph fed to the GCN.

pub mod io;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub parent: String,
    pub start: usize,
}

/// BOLD signal of one subject: `T` time points (rows) by `D` regions (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct BoldSeries {
    pub subject_id: String,
    samples: Array2<f64>,
    pub window_origin: Option<WindowOrigin>,
}

impl BoldSeries {
    pub fn new(subject_id: impl Into<String>, samples: Array2<f64>) -> Result<Self> {
        if samples.nrows() < 2 {
            return Err(invalid!(
                "BOLD series needs at least 2 time points, got {}",
                samples.nrows()
            ));
        }
        if samples.ncols() == 0 {
            return Err(invalid!("BOLD series has no regions"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("BOLD series contains non-finite samples"));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            samples,
            window_origin: None,
        })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn time_points(&self) -> usize {
        self.samples.nrows()
    }

    pub fn regions(&self) -> usize {
        self.samples.ncols()
    }
}

/// Symmetric `D x D` Pearson connectivity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnMatrix {
    values: Array2<f64>,
    degenerate_rows: Vec<usize>,
}

impl FcnMatrix {
    /// Wraps an existing matrix after checking shape, symmetry and range.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let d = values.nrows();
        if d == 0 || values.ncols() != d {
            return Err(invalid!(
                "FCN must be a non-empty square matrix, got {:?}",
                values.dim()
            ));
        }
        for i in 0..d {
            for j in 0..d {
                let v = values[[i, j]];
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(invalid!("FCN entry ({i},{j}) = {v} outside [-1, 1]"));
                }
                if (v - values[[j, i]]).abs() > 1e-12 {
                    return Err(invalid!("FCN is not symmetric at ({i},{j})"));
                }
            }
        }
        Ok(Self {
            values,
            degenerate_rows: Vec::new(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn degenerate_rows(&self) -> &[usize] {
        &self.degenerate_rows
    }

    /// Reorders regions: entry `(i, j)` of the result is entry
    /// `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim();
        let values = Array2::from_shape_fn((d, d), |(i, j)| self.values[[perm[i], perm[j]]]);
        let mut degenerate_rows: Vec<usize> = (0..d)
            .filter(|&i| self.degenerate_rows.contains(&perm[i]))
            .collect();
        degenerate_rows.sort_unstable();
        Self {
            values,
            degenerate_rows,
        }
    }
}

/// Pearson FCN of a BOLD series.
///
/// Zero-variance columns get correlation 0 with every other column and 1 on
/// the diagonal; their indices are listed in `degenerate_rows`.
pub fn pearson_fcn(series: &BoldSeries) -> Result<FcnMatrix> {
    pearson_from_samples(series.samples().view())
}

pub fn pearson_from_samples(samples: ArrayView2<f64>) -> Result<FcnMatrix> {
    let (t, d) = samples.dim();
    if t < 2 {
        return Err(invalid!(
            "Pearson FCN needs at least 2 time points, got {t}"
        ));
    }
    let mean = samples.mean_axis(Axis(0)).expect("t >= 2");
    let centered = &samples - &mean;
    let gram = centered.t().dot(&centered);

    let degenerate_rows: Vec<usize> = (0..d)
        .filter(|&j| {
            let col = samples.column(j);
            col.iter().all(|&v| v == col[0])
        })
        .collect();

    let mut values = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        values[[i, i]] = 1.0;
        if degenerate_rows.contains(&i) {
            continue;
        }
        for j in (i + 1)..d {
            if degenerate_rows.contains(&j) {
                continue;
            }
            let r = (gram[[i, j]] / (gram[[i, i]] * gram[[j, j]]).sqrt()).clamp(-1.0, 1.0);
            values[[i, j]] = r;
            values[[j, i]] = r;
        }
    }
    Ok(FcnMatrix {
        values,
        degenerate_rows,
    })
}

/// Number of windows of length `len` and step `step` that fit in `t` samples.
pub fn window_count(t: usize, len: usize, step: usize) -> usize {
    if len > t || step == 0 {
        0
    } else {
        (t - len) / step + 1
    }
}

/// Splits a series into windows starting at multiples of `step`; an
/// incomplete trailing window is dropped.
pub fn sliding_windows(series: &BoldSeries, len: usize, step: usize) -> Result<Vec<BoldSeries>> {
    let t = series.time_points();
    if len < 2 {
        return Err(invalid!("window length must be at least 2, got {len}"));
    }
    if step == 0 {
        return Err(invalid!("window step must be positive"));
    }
    if len > t {
        return Err(invalid!("window length {len} exceeds series length {t}"));
    }
    let windows = (0..window_count(t, len, step))
        .map(|k| {
            let start = k * step;
            let samples = series
                .samples()
                .slice(ndarray::s![start..start + len, ..])
                .to_owned();
            BoldSeries {
                subject_id: format!("{}_w{k}", series.subject_id),
                samples,
                window_origin: Some(WindowOrigin {
                    parent: series.subject_id.clone(),
                    start,
                }),
            }
        })
        .collect();
    Ok(windows)
}

/// Binary, symmetric, zero-diagonal graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    values: Array2<u8>,
}

impl AdjacencyMatrix {
    pub fn from_values(values: Array2<u8>) -> Result<Self> {
        let d = values.nrows();
        if values.ncols() != d {
            return Err(invalid!("adjacency must be square"));
        }
        for i in 0..d {
            if values[[i, i]] != 0 {
                return Err(invalid!("adjacency has a self-loop at {i}"));
            }
            for j in 0..d {
                if values[[i, j]] > 1 || values[[i, j]] != values[[j, i]] {
                    return Err(invalid!(
                        "adjacency must be binary and symmetric at ({i},{j})"
                    ));
                }
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn edge_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count() / 2
    }
}

/// `A_ij = 1` iff `i != j` and `|r_ij| >= tau`.
pub fn threshold_adjacency(fcn: &FcnMatrix, tau: f64) -> Result<AdjacencyMatrix> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid!("threshold {tau} outside [0, 1]"));
    }
    let d = fcn.dim();
    let values = Array2::from_shape_fn((d, d), |(i, j)| {
        u8::from(i != j && fcn.values()[[i, j]].abs() >= tau)
    });
    Ok(AdjacencyMatrix { values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    values: Array2<f64>,
}

impl NormalizedAdjacency {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn identity(d: usize) -> Self {
        Self {
            values: Array2::eye(d),
        }
    }
}

/// Renormalized propagation matrix `Deg^-1/2 (A + I) Deg^-1/2` where `Deg`
/// holds the degrees of `A + I`.
pub fn normalize_adjacency(adj: &AdjacencyMatrix) -> NormalizedAdjacency {
    let a = adj.values();
    let d = a.nrows();
    let deg: Vec<f64> = (0..d)
        .map(|i| 1.0 + a.row(i).iter().map(|&v| f64::from(v)).sum::<f64>())
        .collect();
    let values = Array2::from_shape_fn((d, d), |(i, j)| {
        let entry = f64::from(a[[i, j]]) + if i == j { 1.0 } else { 0.0 };
        if entry == 0.0 {
            0.0
        } else {
            entry / (deg[i] * deg[j]).sqrt()
        }
    });
    NormalizedAdjacency { values }
}
