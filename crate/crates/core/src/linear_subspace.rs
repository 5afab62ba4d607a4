//! Global and per-class PCA with Moore-Penrose reconstruction and the
//! linear feature reconstruction error.
//!
//! Components come from the SVD of the centered data matrix rather than an
//! eigendecomposition of the covariance; the feature matrices this targets
//! are heavily rank-deficient and the SVD route stays stable there.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_store::{center_columns, split_per_class, FeatureSet};

/// Singular values at or below this fraction of the largest are treated as
/// floating-point noise and never retained.
pub const NOISE_FLOOR: f64 = 1e-10;

/// Default variance retention when none is configured.
pub const DEFAULT_VARIANCE_RETENTION: f64 = 0.995;

/// How many components a fit keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReductionCriterion {
    /// Smallest dimension whose cumulative variance ratio reaches the bound.
    VarianceFraction(f64),
    /// Exact dimension, capped at the numerical rank.
    FixedDim(usize),
}

/// Fitted PCA model: mean, orthonormal component rows, component variances.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSubspace {
    mean: DVector<f64>,
    components: DMatrix<f64>,
    spectrum: DVector<f64>,
    variance_retained: f64,
}

impl LinearSubspace {
    pub fn from_parts(
        mean: DVector<f64>,
        components: DMatrix<f64>,
        spectrum: DVector<f64>,
        variance_retained: f64,
    ) -> Self {
        LinearSubspace {
            mean,
            components,
            spectrum,
            variance_retained,
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn spectrum(&self) -> &DVector<f64> {
        &self.spectrum
    }

    pub fn variance_retained(&self) -> f64 {
        self.variance_retained
    }

    /// Reduced dimension d.
    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    /// Ambient dimension D.
    pub fn ambient_dim(&self) -> usize {
        self.components.ncols()
    }

    fn check_ambient(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ambient_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// z = components * (x - mean)
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_ambient(x)?;
        Ok(&self.components * (x - &self.mean))
    }

    /// x_hat = mean + components^T * z; the pseudo-inverse of an orthonormal
    /// forward map is its transpose.
    pub fn reconstruct(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        Ok(&self.mean + self.components.transpose() * z)
    }

    /// L2 distance between x and the reconstruction of its projection:
    /// the orthogonal distance of x - mean to the component span.
    pub fn reconstruction_error(&self, x: &DVector<f64>) -> Result<f64> {
        let z = self.project(x)?;
        let xh = self.reconstruct(&z)?;
        Ok((x - xh).norm())
    }
}

/// Fits PCA on rows of `x`. Mean is the column mean; components are the top
/// right-singular vectors of the centered matrix, each row sign-fixed so its
/// largest-magnitude entry is positive.
pub fn fit_pca(x: &DMatrix<f64>, criterion: ReductionCriterion) -> Result<LinearSubspace> {
    let m = x.nrows();
    if m < 2 {
        return Err(Error::InsufficientSamples(format!(
            "pca needs at least 2 samples, got {m}"
        )));
    }
    let mean = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / m as f64);
    let centered = center_columns(x);
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("svd did not produce right singular vectors".into()))?;

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let sigma_max = sigma[0];
    if !(sigma_max > 0.0) {
        return Err(Error::Numerical(
            "degenerate data: all singular values are zero".into(),
        ));
    }
    let usable = sigma
        .iter()
        .filter(|&&s| s > NOISE_FLOOR * sigma_max)
        .count();

    let total_var: f64 = sigma.iter().map(|s| s * s).sum();
    let d = match criterion {
        ReductionCriterion::VarianceFraction(v) => {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!(
                    "variance fraction {v} outside (0, 1]"
                )));
            }
            let mut cum = 0.0;
            let mut d = usable;
            for (i, s) in sigma.iter().take(usable).enumerate() {
                cum += s * s;
                if cum / total_var >= v {
                    d = i + 1;
                    break;
                }
            }
            d
        }
        ReductionCriterion::FixedDim(want) => {
            if want == 0 {
                return Err(Error::Config("fixed_dim must be at least 1".into()));
            }
            if want > usable {
                log::warn!(
                    "requested {want} components but the data supports {usable}; capping"
                );
            }
            want.min(usable)
        }
    };

    let mut components = DMatrix::zeros(d, x.ncols());
    for (r, &i) in order.iter().take(d).enumerate() {
        components.row_mut(r).copy_from(&v_t.row(i));
    }
    fix_row_signs(&mut components);

    let denom = (m - 1) as f64;
    let spectrum = DVector::from_fn(d, |i, _| sigma[i] * sigma[i] / denom);
    let retained: f64 = sigma.iter().take(d).map(|s| s * s).sum::<f64>() / total_var;

    Ok(LinearSubspace {
        mean,
        components,
        spectrum,
        variance_retained: retained,
    })
}

/// Flips each row so its largest-magnitude entry is positive; serialized
/// models then come out identical run to run.
pub(crate) fn fix_row_signs(m: &mut DMatrix<f64>) {
    for r in 0..m.nrows() {
        let mut best = 0;
        let mut best_abs = 0.0;
        for c in 0..m.ncols() {
            let a = m[(r, c)].abs();
            if a > best_abs {
                best_abs = a;
                best = c;
            }
        }
        if m[(r, best)] < 0.0 {
            for c in 0..m.ncols() {
                m[(r, c)] = -m[(r, c)];
            }
        }
    }
}

/// Whether a bundle holds one model for all data or one per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionMode {
    Global,
    PerClass,
}

impl std::fmt::Display for ReductionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReductionMode::Global => write!(f, "global"),
            ReductionMode::PerClass => write!(f, "per_class"),
        }
    }
}

/// One global subspace, or one per class.
#[derive(Debug, Clone, PartialEq)]
pub enum SubspaceBundle {
    Global(LinearSubspace),
    PerClass(BTreeMap<usize, LinearSubspace>),
}

impl SubspaceBundle {
    pub fn mode(&self) -> ReductionMode {
        match self {
            SubspaceBundle::Global(_) => ReductionMode::Global,
            SubspaceBundle::PerClass(_) => ReductionMode::PerClass,
        }
    }

    /// Largest reduced dimension across the bundle's models.
    pub fn max_dim(&self) -> usize {
        match self {
            SubspaceBundle::Global(s) => s.dim(),
            SubspaceBundle::PerClass(map) => map.values().map(|s| s.dim()).max().unwrap_or(0),
        }
    }

    /// Global mode: the single model's reconstruction error. Per-class
    /// mode: the minimum over class subspaces — a sample counts as
    /// in-distribution if it is close to any class subspace.
    pub fn bundle_error(&self, x: &DVector<f64>) -> Result<f64> {
        match self {
            SubspaceBundle::Global(s) => s.reconstruction_error(x),
            SubspaceBundle::PerClass(map) => {
                let mut best = f64::INFINITY;
                for s in map.values() {
                    best = best.min(s.reconstruction_error(x)?);
                }
                Ok(best)
            }
        }
    }
}

/// Fits a global or per-class PCA bundle. Per-class fits run in parallel.
pub fn fit_bundle(
    fs: &FeatureSet,
    criterion: ReductionCriterion,
    mode: ReductionMode,
) -> Result<SubspaceBundle> {
    match mode {
        ReductionMode::Global => Ok(SubspaceBundle::Global(fit_pca(&fs.x, criterion)?)),
        ReductionMode::PerClass => {
            let groups = split_per_class(fs)?;
            let fitted: Result<Vec<(usize, LinearSubspace)>> = groups
                .par_iter()
                .map(|(k, xk)| Ok((*k, fit_pca(xk, criterion)?)))
                .collect();
            Ok(SubspaceBundle::PerClass(fitted?.into_iter().collect()))
        }
    }
}
