//! xDAWN spatial filters in covariance form.
//!
//! Filters maximise the ratio of evoked (mean target response) variance to
//! overall variance: Cs v = λ Cx v with Cs = P̄P̄ᵀ/T and Cx the mean per-epoch
//! covariance, lightly ridge-regularised.

use ndarray::{Array1, Array2};

use crate::error::{BciError, Result};
use crate::linalg::generalized_symmetric_eigen;

pub const DEFAULT_N_FILTERS: usize = 5;
pub const REGULARIZATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFilterBank {
    /// n_filters x n_channels.
    pub filters: Array2<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
}

impl SpatialFilterBank {
    pub fn n_filters(&self) -> usize {
        self.filters.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.filters.ncols()
    }

    pub fn identity(n: usize) -> Self {
        Self { filters: Array2::eye(n), eigenvalues: vec![1.0; n] }
    }
}

fn check_windows(set: &[Array2<f64>], what: &str, shape: Option<(usize, usize)>) -> Result<(usize, usize)> {
    if set.len() < 2 {
        return Err(BciError::InvalidParameter(format!("xDAWN needs at least 2 {what} epochs, got {}", set.len())));
    }
    let dim = shape.unwrap_or(set[0].dim());
    if set.iter().any(|w| w.dim() != dim) {
        return Err(BciError::Shape(format!("{what} epochs differ in shape")));
    }
    if set.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
        return Err(BciError::NonFinite("epoch data"));
    }
    Ok(dim)
}

/// Evoked covariance and regularised overall covariance.
pub fn covariances(targets: &[Array2<f64>], all: &[Array2<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, t) = check_windows(targets, "target", None)?;
    check_windows(all, "overall", Some((n, t)))?;
    let mut mean = Array2::<f64>::zeros((n, t));
    for w in targets {
        mean += w;
    }
    mean /= targets.len() as f64;
    let cs = mean.dot(&mean.t()) / t as f64;
    let mut cx = Array2::<f64>::zeros((n, n));
    for w in all {
        cx += &(w.dot(&w.t()) / t as f64);
    }
    cx /= all.len() as f64;
    let ridge = REGULARIZATION * cx.diag().sum() / n as f64;
    for i in 0..n {
        cx[[i, i]] += ridge;
    }
    Ok((cs, cx))
}

pub fn fit_xdawn(targets: &[Array2<f64>], all: &[Array2<f64>], n_filters: usize) -> Result<SpatialFilterBank> {
    let (cs, cx) = covariances(targets, all)?;
    let n = cs.nrows();
    if n_filters == 0 || n_filters > n {
        return Err(BciError::InvalidParameter(format!("n_filters must be in 1..={n}, got {n_filters}")));
    }
    let (values, vectors) = generalized_symmetric_eigen(&cs, &cx)?;
    let mut mean = Array2::<f64>::zeros(targets[0].dim());
    for w in targets {
        mean += w;
    }
    let mut filters = Array2::<f64>::zeros((n_filters, n));
    for k in 0..n_filters {
        let mut v: Array1<f64> = vectors.column(k).to_owned();
        let response = v.dot(&mean);
        let (hi, lo) = response.iter().fold((f64::MIN, f64::MAX), |(h, l), &x| (h.max(x), l.min(x)));
        if -lo > hi {
            v.mapv_inplace(|x| -x);
        }
        filters.row_mut(k).assign(&v);
    }
    Ok(SpatialFilterBank { filters, eigenvalues: values[..n_filters].to_vec() })
}

pub fn apply_filters(window: &Array2<f64>, bank: &SpatialFilterBank) -> Result<Array2<f64>> {
    if window.nrows() != bank.n_channels() {
        return Err(BciError::Shape(format!(
            "window has {} channels, filter bank expects {}",
            window.nrows(),
            bank.n_channels()
        )));
    }
    Ok(bank.filters.dot(window))
}
