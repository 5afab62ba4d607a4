//! RBF kernel PCA with a fixed-point pre-image, providing the nonlinear
//! embedding and the kernel feature reconstruction error.
//!
//! A linear-kernel hook mirrors plain PCA through the same code path; the
//! consistency suite uses it to check every kernel operation against its
//! linear counterpart.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_store::{split_per_class, FeatureSet};
use crate::linear_subspace::{fix_row_signs, ReductionCriterion, ReductionMode};
use crate::rng::rng_for;

pub const DEFAULT_MAX_ANCHORS: usize = 2000;
pub const PREIMAGE_MAX_ITER: usize = 100;
pub const PREIMAGE_TOL: f64 = 1e-6;

/// Eigenvalues at or below this fraction of the largest are dropped.
const EIG_NOISE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    /// k(x, y) = exp(-gamma * |x - y|^2)
    Rbf { gamma: f64 },
    /// k(x, y) = x . y — test hook reproducing linear PCA.
    Linear,
}

impl KernelKind {
    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        match self {
            KernelKind::Rbf { gamma } => (-gamma * (x - y).norm_squared()).exp(),
            KernelKind::Linear => x.dot(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KpcaParams {
    pub kernel: KernelKind,
    pub criterion: ReductionCriterion,
    pub max_anchors: usize,
    pub seed: u64,
}

impl KpcaParams {
    pub fn rbf(gamma: f64, criterion: ReductionCriterion) -> Self {
        KpcaParams {
            kernel: KernelKind::Rbf { gamma },
            criterion,
            max_anchors: DEFAULT_MAX_ANCHORS,
            seed: 0,
        }
    }
}

/// Fitted kernel PCA model. `alphas` rows are eigenvector coefficients
/// scaled so each feature-space axis has unit norm: eigval_i |alpha_i|^2 = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSubspace {
    anchors: DMatrix<f64>,
    /// anchors transposed (D x m): each anchor is a contiguous column,
    /// which keeps the distance loops cache-friendly.
    anchors_t: DMatrix<f64>,
    kernel: KernelKind,
    alphas: DMatrix<f64>,
    eigvals: DVector<f64>,
    gram_row_means: DVector<f64>,
    gram_total_mean: f64,
    fit_seed: u64,
}

#[inline]
fn dist2_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[inline]
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Result of a pre-image search.
#[derive(Debug, Clone)]
pub struct Preimage {
    pub point: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Kernel reconstruction error with its convergence flag; a failed search
/// still yields a finite score.
#[derive(Debug, Clone, Copy)]
pub struct KpesScore {
    pub error: f64,
    pub converged: bool,
}

impl KernelSubspace {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        anchors: DMatrix<f64>,
        kernel: KernelKind,
        alphas: DMatrix<f64>,
        eigvals: DVector<f64>,
        gram_row_means: DVector<f64>,
        gram_total_mean: f64,
        fit_seed: u64,
    ) -> Self {
        let anchors_t = anchors.transpose();
        KernelSubspace {
            anchors,
            anchors_t,
            kernel,
            alphas,
            eigvals,
            gram_row_means,
            gram_total_mean,
            fit_seed,
        }
    }

    /// Anchor i as a contiguous slice.
    #[inline]
    fn anchor_slice(&self, i: usize) -> &[f64] {
        let d = self.ambient_dim();
        &self.anchors_t.as_slice()[i * d..(i + 1) * d]
    }

    #[inline]
    fn kernel_to_anchor(&self, x: &[f64], i: usize) -> f64 {
        match self.kernel {
            KernelKind::Rbf { gamma } => (-gamma * dist2_slices(x, self.anchor_slice(i))).exp(),
            KernelKind::Linear => dot_slices(x, self.anchor_slice(i)),
        }
    }

    pub fn anchors(&self) -> &DMatrix<f64> {
        &self.anchors
    }

    pub fn kernel(&self) -> KernelKind {
        self.kernel
    }

    pub fn alphas(&self) -> &DMatrix<f64> {
        &self.alphas
    }

    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    pub fn gram_row_means(&self) -> &DVector<f64> {
        &self.gram_row_means
    }

    pub fn gram_total_mean(&self) -> f64 {
        self.gram_total_mean
    }

    pub fn fit_seed(&self) -> u64 {
        self.fit_seed
    }

    /// Reduced dimension d.
    pub fn dim(&self) -> usize {
        self.alphas.nrows()
    }

    /// Ambient dimension D.
    pub fn ambient_dim(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.nrows()
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

    fn kernel_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        let xs = x.as_slice();
        DVector::from_fn(self.num_anchors(), |i, _| self.kernel_to_anchor(xs, i))
    }

    /// Centers a raw kernel vector with the stored training statistics.
    fn center_kernel_vector(&self, k_x: &DVector<f64>) -> DVector<f64> {
        let mean_kx = k_x.sum() / k_x.len() as f64;
        DVector::from_fn(k_x.len(), |j, _| {
            k_x[j] - mean_kx - self.gram_row_means[j] + self.gram_total_mean
        })
    }

    /// z_i = alpha_i . centered kernel vector of x.
    pub fn kproject(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_ambient(x)?;
        let k_x = self.kernel_vector(x);
        Ok(&self.alphas * self.center_kernel_vector(&k_x))
    }

    /// Embeds every row of `x`; rows of the output are embeddings.
    pub fn embed_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ambient_dim(),
                actual: x.ncols(),
            });
        }
        let rows: Vec<DVector<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| self.kproject(&x.row(i).transpose()).expect("dims checked"))
            .collect();
        let mut out = DMatrix::zeros(x.nrows(), self.dim());
        for (i, z) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from(&z.transpose());
        }
        Ok(out)
    }

    /// Training embeddings of the anchors: row i is sqrt(eigval_k) v_k(i)
    /// across components k.
    pub fn training_embeddings(&self) -> DMatrix<f64> {
        // alphas * K_c equals eigvals .* alphas row-wise; recompute from
        // the stored pieces instead of keeping K_c around.
        let mut out = DMatrix::zeros(self.num_anchors(), self.dim());
        for k in 0..self.dim() {
            for i in 0..self.num_anchors() {
                out[(i, k)] = self.eigvals[k] * self.alphas[(k, i)];
            }
        }
        out
    }

    /// Expansion coefficients of the feature-space reconstruction
    /// Phi = sum_i gamma_i phi(anchor_i) for an embedding z, including the
    /// Gram-centering correction.
    fn expansion_coefficients(&self, z: &DVector<f64>) -> DVector<f64> {
        let m = self.num_anchors() as f64;
        let alpha_row_sums = DVector::from_fn(self.dim(), |k, _| self.alphas.row(k).sum());
        let correction = (1.0 - z.dot(&alpha_row_sums)) / m;
        let mut coeffs = self.alphas.transpose() * z;
        coeffs.add_scalar_mut(correction);
        coeffs
    }

    /// Fixed-point pre-image search for the RBF kernel, started at `init`.
    /// The linear hook has the closed-form answer sum_i gamma_i anchor_i.
    pub fn preimage(
        &self,
        z: &DVector<f64>,
        init: &DVector<f64>,
        max_iter: usize,
        tol: f64,
    ) -> Result<Preimage> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        self.check_ambient(init)?;
        let coeffs = self.expansion_coefficients(z);

        let gamma = match self.kernel {
            KernelKind::Linear => {
                return Ok(Preimage {
                    point: self.anchors.transpose() * coeffs,
                    converged: true,
                    iterations: 0,
                });
            }
            KernelKind::Rbf { gamma } => gamma,
        };

        match self.rbf_fixed_point(&coeffs, gamma, init.clone(), max_iter, tol) {
            Some(p) => Ok(p),
            None => {
                // Weight sum collapsed: restart from the mean of the 5
                // anchors nearest the starting point.
                let restart = self.nearest_anchor_mean(init, 5);
                match self.rbf_fixed_point(&coeffs, gamma, restart, max_iter, tol) {
                    Some(p) => Ok(p),
                    None => Ok(Preimage {
                        point: self.nearest_anchor(init),
                        converged: false,
                        iterations: max_iter,
                    }),
                }
            }
        }
    }

    /// Pre-image for an embedding with no query point available: start from
    /// the anchors whose training embeddings sit closest to z.
    pub fn preimage_from_embedding(
        &self,
        z: &DVector<f64>,
        max_iter: usize,
        tol: f64,
    ) -> Result<Preimage> {
        let emb = self.training_embeddings();
        let mut by_dist: Vec<(f64, usize)> = (0..self.num_anchors())
            .map(|i| ((emb.row(i).transpose() - z).norm(), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let take = by_dist.len().min(5);
        let mut init = DVector::zeros(self.ambient_dim());
        let mut wsum = 0.0;
        for &(d, i) in by_dist.iter().take(take) {
            let w = 1.0 / (1e-12 + d);
            init += self.anchors.row(i).transpose() * w;
            wsum += w;
        }
        init /= wsum;
        self.preimage(z, &init, max_iter, tol)
    }

    /// One run of the Mika-style fixed-point iteration. Returns None when
    /// the weight sum collapses to zero or the iterate turns non-finite.
    fn rbf_fixed_point(
        &self,
        coeffs: &DVector<f64>,
        gamma: f64,
        mut x: DVector<f64>,
        max_iter: usize,
        tol: f64,
    ) -> Option<Preimage> {
        let m = self.num_anchors();
        let dim = self.ambient_dim();
        let mut d2 = vec![0.0f64; m];
        for iter in 0..max_iter {
            let xs = x.as_slice();
            let mut d2_min = f64::INFINITY;
            for (i, slot) in d2.iter_mut().enumerate() {
                let d = dist2_slices(xs, self.anchor_slice(i));
                d2_min = d2_min.min(d);
                *slot = d;
            }
            // The weighted mean is scale-invariant in the weights, so shift
            // the exponent by the smallest distance to dodge underflow.
            let mut num = vec![0.0f64; dim];
            let mut den = 0.0;
            for i in 0..m {
                let w = coeffs[i] * (-gamma * (d2[i] - d2_min)).exp();
                let col = self.anchor_slice(i);
                for (acc, &a) in num.iter_mut().zip(col) {
                    *acc += a * w;
                }
                den += w;
            }
            if !(den.abs() > 1e-300) || !den.is_finite() {
                return None;
            }
            let mut step2 = 0.0;
            let mut finite = true;
            for (slot, acc) in x.iter_mut().zip(&num) {
                let v = acc / den;
                if !v.is_finite() {
                    finite = false;
                    break;
                }
                let d = v - *slot;
                step2 += d * d;
                *slot = v;
            }
            if !finite {
                return None;
            }
            if step2.sqrt() < tol {
                return Some(Preimage {
                    point: x,
                    converged: true,
                    iterations: iter + 1,
                });
            }
        }
        Some(Preimage {
            point: x,
            converged: false,
            iterations: max_iter,
        })
    }

    fn nearest_anchor_mean(&self, to: &DVector<f64>, k: usize) -> DVector<f64> {
        let ts = to.as_slice();
        let mut by_dist: Vec<(f64, usize)> = (0..self.num_anchors())
            .map(|i| (dist2_slices(ts, self.anchor_slice(i)), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let take = by_dist.len().min(k);
        let mut mean = DVector::zeros(self.ambient_dim());
        for &(_, i) in by_dist.iter().take(take) {
            mean += DVector::from_column_slice(self.anchor_slice(i));
        }
        mean / take as f64
    }

    fn nearest_anchor(&self, to: &DVector<f64>) -> DVector<f64> {
        let ts = to.as_slice();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.num_anchors() {
            let d = dist2_slices(ts, self.anchor_slice(i));
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        DVector::from_column_slice(self.anchor_slice(best))
    }

    /// |x - preimage(kproject(x))|, with the search started at x itself:
    /// the query is available at scoring time and is the natural basin.
    pub fn kreconstruction_error(&self, x: &DVector<f64>) -> Result<KpesScore> {
        let z = self.kproject(x)?;
        let pre = self.preimage(&z, x, PREIMAGE_MAX_ITER, PREIMAGE_TOL)?;
        Ok(KpesScore {
            error: (x - pre.point).norm(),
            converged: pre.converged,
        })
    }
}

/// Fits kernel PCA: Gram matrix over the anchors (all of `x`, or a seeded
/// uniform subset of max_anchors rows), double centering, eigendecomposition,
/// retention by criterion.
pub fn fit_kpca(x: &DMatrix<f64>, params: &KpcaParams) -> Result<KernelSubspace> {
    let m_total = x.nrows();
    if m_total < 2 {
        return Err(Error::InsufficientSamples(format!(
            "kernel pca needs at least 2 samples, got {m_total}"
        )));
    }
    if let KernelKind::Rbf { gamma } = params.kernel {
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
    }
    if params.max_anchors < 2 {
        return Err(Error::Config("max_anchors must be at least 2".into()));
    }

    let anchors = if m_total <= params.max_anchors {
        x.clone()
    } else {
        let mut idx: Vec<usize> = (0..m_total).collect();
        let mut rng = rng_for(params.seed, "kpca.anchors");
        idx.shuffle(&mut rng);
        idx.truncate(params.max_anchors);
        idx.sort_unstable();
        let mut sub = DMatrix::zeros(params.max_anchors, x.ncols());
        for (r, &src) in idx.iter().enumerate() {
            sub.row_mut(r).copy_from(&x.row(src));
        }
        sub
    };
    let m = anchors.nrows();
    let dim = anchors.ncols();
    let anchors_t = anchors.transpose();
    let col = |i: usize| &anchors_t.as_slice()[i * dim..(i + 1) * dim];

    // Gram matrix; upper triangle in parallel rows, mirrored by symmetry.
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let xi = col(i);
            (i..m)
                .map(|j| match params.kernel {
                    KernelKind::Rbf { gamma } => (-gamma * dist2_slices(xi, col(j))).exp(),
                    KernelKind::Linear => dot_slices(xi, col(j)),
                })
                .collect()
        })
        .collect();
    let mut gram = DMatrix::zeros(m, m);
    for (i, row) in rows.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            gram[(i, i + off)] = v;
            gram[(i + off, i)] = v;
        }
    }

    let row_means = DVector::from_fn(m, |i, _| gram.row(i).sum() / m as f64);
    let total_mean = row_means.sum() / m as f64;
    let centered = DMatrix::from_fn(m, m, |i, j| {
        gram[(i, j)] - row_means[i] - row_means[j] + total_mean
    });

    let eig = centered.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let lambda_max = eig.eigenvalues[order[0]];
    if !(lambda_max > 0.0) {
        return Err(Error::DegenerateGram(
            "no positive eigenvalues in the centered Gram matrix".into(),
        ));
    }
    let usable: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| eig.eigenvalues[i] > EIG_NOISE_FLOOR * lambda_max)
        .collect();
    if usable.is_empty() {
        return Err(Error::DegenerateGram(
            "all centered-Gram eigenvalues below the noise floor".into(),
        ));
    }

    let total: f64 = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .sum();
    let d = match params.criterion {
        ReductionCriterion::VarianceFraction(v) => {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!(
                    "eigenvalue fraction {v} outside (0, 1]"
                )));
            }
            let mut cum = 0.0;
            let mut d = usable.len();
            for (pos, &i) in usable.iter().enumerate() {
                cum += eig.eigenvalues[i];
                if cum / total >= v {
                    d = pos + 1;
                    break;
                }
            }
            d
        }
        ReductionCriterion::FixedDim(want) => {
            if want == 0 {
                return Err(Error::Config("fixed_dim must be at least 1".into()));
            }
            if want > usable.len() {
                log::warn!(
                    "requested {want} kernel components but the Gram supports {}; capping",
                    usable.len()
                );
            }
            want.min(usable.len())
        }
    };

    let mut alphas = DMatrix::zeros(d, m);
    let mut eigvals = DVector::zeros(d);
    for (r, &i) in usable.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        let scale = 1.0 / lambda.sqrt();
        for j in 0..m {
            alphas[(r, j)] = v[j] * scale;
        }
        eigvals[r] = lambda;
    }
    fix_row_signs(&mut alphas);

    Ok(KernelSubspace::from_parts(
        anchors,
        params.kernel,
        alphas,
        eigvals,
        row_means,
        total_mean,
        params.seed,
    ))
}

/// Median-heuristic base width: 1 / (D * median pairwise squared distance),
/// estimated from up to 2000 seeded sample pairs. Grid multipliers scale it.
pub fn median_heuristic_gamma(x: &DMatrix<f64>, seed: u64) -> Result<f64> {
    let m = x.nrows();
    if m < 2 {
        return Err(Error::InsufficientSamples(
            "median heuristic needs at least 2 samples".into(),
        ));
    }
    let mut rng = rng_for(seed, "kpca.gamma.median");
    let pairs = 2000.min(m * (m - 1) / 2);
    let mut d2: Vec<f64> = Vec::with_capacity(pairs);
    use rand::Rng;
    while d2.len() < pairs {
        let i = rng.random_range(0..m);
        let j = rng.random_range(0..m);
        if i == j {
            continue;
        }
        d2.push((x.row(i) - x.row(j)).norm_squared());
    }
    d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = d2[d2.len() / 2];
    if !(median > 0.0) {
        return Err(Error::DegenerateGram(
            "median pairwise distance is zero".into(),
        ));
    }
    Ok(1.0 / (x.ncols() as f64 * median))
}

/// One global kernel subspace, or one per class; aggregation mirrors the
/// linear bundle (min error over classes).
#[derive(Debug, Clone, PartialEq)]
pub enum KernelBundle {
    Global(KernelSubspace),
    PerClass(BTreeMap<usize, KernelSubspace>),
}

impl KernelBundle {
    pub fn mode(&self) -> ReductionMode {
        match self {
            KernelBundle::Global(_) => ReductionMode::Global,
            KernelBundle::PerClass(_) => ReductionMode::PerClass,
        }
    }

    pub fn max_dim(&self) -> usize {
        match self {
            KernelBundle::Global(s) => s.dim(),
            KernelBundle::PerClass(map) => map.values().map(|s| s.dim()).max().unwrap_or(0),
        }
    }

    pub fn bundle_error(&self, x: &DVector<f64>) -> Result<KpesScore> {
        match self {
            KernelBundle::Global(s) => s.kreconstruction_error(x),
            KernelBundle::PerClass(map) => {
                let mut best = KpesScore {
                    error: f64::INFINITY,
                    converged: true,
                };
                for s in map.values() {
                    let score = s.kreconstruction_error(x)?;
                    if score.error < best.error {
                        best.error = score.error;
                        best.converged = score.converged;
                    }
                }
                Ok(best)
            }
        }
    }
}

/// Fits a global or per-class kernel bundle; per-class fits run in parallel.
pub fn fit_kernel_bundle(
    fs: &FeatureSet,
    params: &KpcaParams,
    mode: ReductionMode,
) -> Result<KernelBundle> {
    match mode {
        ReductionMode::Global => Ok(KernelBundle::Global(fit_kpca(&fs.x, params)?)),
        ReductionMode::PerClass => {
            let groups = split_per_class(fs)?;
            let fitted: Result<Vec<(usize, KernelSubspace)>> = groups
                .par_iter()
                .map(|(k, xk)| Ok((*k, fit_kpca(xk, params)?)))
                .collect();
            Ok(KernelBundle::PerClass(fitted?.into_iter().collect()))
        }
    }
}
