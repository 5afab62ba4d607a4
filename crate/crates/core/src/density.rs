//! Class-conditional densities over reduced features: shared-covariance
//! Gaussians (the Mahalanobis baseline), per-class Gaussians (QDA), and
//! GMMs fitted by EM with BIC model selection.
//!
//! Covariances use the 1/M_k normalizer. Plain Gaussian fits are
//! regularized additively, `cov += reg * (trace/d) * I`. GMM M-steps
//! instead clamp covariance eigenvalues at the same floor: the clamp is the
//! exact M-step over the eigenvalue-bounded model family, which keeps the
//! EM log-likelihood nondecreasing; an additive bump applied after the
//! M-step would not.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const DEFAULT_REG: f64 = 1e-6;
pub const DEFAULT_GMM_K_MAX: usize = 5;
pub const DEFAULT_GMM_RESTARTS: usize = 3;

const EM_TOL: f64 = 1e-6;
const EM_MAX_ITER: usize = 500;

const LN_2PI: f64 = 1.8378770664093453;

/// Covariance with its cached Cholesky-derived precision and log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct CovCache {
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    logdet: f64,
}

impl CovCache {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self> {
        let sym_err = (&covariance - covariance.transpose()).abs().max();
        if sym_err > 1e-10 {
            return Err(Error::Numerical(format!(
                "covariance not symmetric (max asymmetry {sym_err:.2e})"
            )));
        }
        let chol = nalgebra::Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::Numerical("singular covariance after regularization".into()))?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !logdet.is_finite() {
            return Err(Error::Numerical("non-finite covariance log-determinant".into()));
        }
        let precision = chol.inverse();
        Ok(CovCache {
            covariance,
            precision,
            logdet,
        })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// diff^T * precision * diff
    pub fn quad(&self, diff: &DVector<f64>) -> f64 {
        (&self.precision * diff).dot(diff)
    }
}

/// Single multivariate Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    cov: CovCache,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if mean.len() != covariance.nrows() {
            return Err(Error::DimensionMismatch {
                expected: covariance.nrows(),
                actual: mean.len(),
            });
        }
        Ok(GaussianComponent {
            mean,
            cov: CovCache::new(covariance)?,
        })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        self.cov.covariance()
    }

    pub fn cov_cache(&self) -> &CovCache {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        let diff = z - &self.mean;
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.cov.logdet() + self.cov.quad(&diff)))
    }
}

/// mean = (1/M) sum x; cov = (1/M) sum (x-mean)(x-mean)^T + reg*(trace/d)*I.
/// With a zero-trace scatter the floor falls back to reg * I.
pub fn fit_gaussian(x: &DMatrix<f64>, reg: f64) -> Result<GaussianComponent> {
    let (mean, scatter) = mean_and_scatter(x)?;
    let cov = regularize_additive(scatter, reg);
    GaussianComponent::new(mean, cov)
}

fn mean_and_scatter(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = x.nrows();
    if m < 2 {
        return Err(Error::InsufficientSamples(format!(
            "gaussian fit needs at least 2 samples, got {m}"
        )));
    }
    let d = x.ncols();
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / m as f64);
    let mut scatter = DMatrix::zeros(d, d);
    for i in 0..m {
        let diff = x.row(i).transpose() - &mean;
        scatter += &diff * diff.transpose();
    }
    scatter /= m as f64;
    if scatter.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite covariance".into()));
    }
    Ok((mean, scatter))
}

fn regularize_additive(mut cov: DMatrix<f64>, reg: f64) -> DMatrix<f64> {
    let d = cov.nrows();
    let mut scale = cov.trace() / d as f64;
    if !(scale > 0.0) {
        scale = 1.0;
    }
    for i in 0..d {
        cov[(i, i)] += reg * scale;
    }
    cov
}

/// Exact maximizer of the Gaussian M-step over covariances whose
/// eigenvalues are bounded below by `floor`.
fn clamp_eigenvalues(scatter: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (scatter + scatter.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    for v in eig.eigenvalues.iter_mut() {
        if *v < floor {
            *v = floor;
        }
    }
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&eig.eigenvalues) * q.transpose()
}

/// Weighted mixture of Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensity {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

impl MixtureDensity {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::Config(format!(
                "mixture needs matching weights/components, got {}/{}",
                weights.len(),
                components.len()
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() >= 1e-12 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config(format!("weights must form a simplex, sum {sum}")));
        }
        Ok(MixtureDensity {
            weights,
            components,
        })
    }

    pub fn single(component: GaussianComponent) -> Self {
        MixtureDensity {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// ln sum_j w_j N(z; mu_j, Sigma_j) via log-sum-exp.
    pub fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        if self.components.len() == 1 {
            return self.components[0].log_density(z);
        }
        let mut terms = Vec::with_capacity(self.components.len());
        for (w, c) in self.weights.iter().zip(&self.components) {
            if *w > 0.0 {
                terms.push(w.ln() + c.log_density(z)?);
            }
        }
        Ok(log_sum_exp(&terms))
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Which density family models each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityKind {
    SharedGaussian,
    SeparateGaussian,
    Gmm,
}

impl std::fmt::Display for DensityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DensityKind::SharedGaussian => write!(f, "shared"),
            DensityKind::SeparateGaussian => write!(f, "separate"),
            DensityKind::Gmm => write!(f, "gmm"),
        }
    }
}

impl std::str::FromStr for DensityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" | "shared_gaussian" => Ok(DensityKind::SharedGaussian),
            "separate" | "separate_gaussian" => Ok(DensityKind::SeparateGaussian),
            "gmm" => Ok(DensityKind::Gmm),
            other => Err(Error::Config(format!("unknown density kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DensityConfig {
    pub kind: DensityKind,
    pub reg: f64,
    pub gmm_k_max: usize,
    pub gmm_restarts: usize,
    pub seed: u64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            kind: DensityKind::SeparateGaussian,
            reg: DEFAULT_REG,
            gmm_k_max: DEFAULT_GMM_K_MAX,
            gmm_restarts: DEFAULT_GMM_RESTARTS,
            seed: 0,
        }
    }
}

/// Per-class density model. The shared variant keeps exactly one
/// covariance, referenced by every class.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassConditionalModel {
    Shared {
        means: BTreeMap<usize, DVector<f64>>,
        cov: CovCache,
    },
    Separate {
        classes: BTreeMap<usize, GaussianComponent>,
    },
    Gmm {
        classes: BTreeMap<usize, MixtureDensity>,
        meta: BTreeMap<usize, GmmMeta>,
    },
}

impl ClassConditionalModel {
    pub fn kind(&self) -> DensityKind {
        match self {
            ClassConditionalModel::Shared { .. } => DensityKind::SharedGaussian,
            ClassConditionalModel::Separate { .. } => DensityKind::SeparateGaussian,
            ClassConditionalModel::Gmm { .. } => DensityKind::Gmm,
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        match self {
            ClassConditionalModel::Shared { means, .. } => means.keys().copied().collect(),
            ClassConditionalModel::Separate { classes } => classes.keys().copied().collect(),
            ClassConditionalModel::Gmm { classes, .. } => classes.keys().copied().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ClassConditionalModel::Shared { cov, .. } => cov.dim(),
            ClassConditionalModel::Separate { classes } => {
                classes.values().next().map(|c| c.dim()).unwrap_or(0)
            }
            ClassConditionalModel::Gmm { classes, .. } => {
                classes.values().next().map(|m| m.dim()).unwrap_or(0)
            }
        }
    }

    pub fn log_density_class(&self, class: usize, z: &DVector<f64>) -> Result<f64> {
        match self {
            ClassConditionalModel::Shared { means, cov } => {
                let mean = means
                    .get(&class)
                    .ok_or_else(|| Error::Config(format!("unknown class {class}")))?;
                if z.len() != cov.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: cov.dim(),
                        actual: z.len(),
                    });
                }
                let diff = z - mean;
                Ok(-0.5 * (cov.dim() as f64 * LN_2PI + cov.logdet() + cov.quad(&diff)))
            }
            ClassConditionalModel::Separate { classes } => classes
                .get(&class)
                .ok_or_else(|| Error::Config(format!("unknown class {class}")))?
                .log_density(z),
            ClassConditionalModel::Gmm { classes, .. } => classes
                .get(&class)
                .ok_or_else(|| Error::Config(format!("unknown class {class}")))?
                .log_density(z),
        }
    }

    /// Confidence score: max over classes of the class log-density.
    /// Higher means more in-distribution.
    pub fn confidence_ll(&self, z: &DVector<f64>) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for k in self.classes() {
            best = best.max(self.log_density_class(k, z)?);
        }
        Ok(best)
    }

    /// Negated minimum squared Mahalanobis distance to the class means
    /// under the shared covariance. Only defined for the shared kind.
    pub fn mahalanobis_score(&self, z: &DVector<f64>) -> Result<f64> {
        match self {
            ClassConditionalModel::Shared { means, cov } => {
                if z.len() != cov.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: cov.dim(),
                        actual: z.len(),
                    });
                }
                let mut best = f64::INFINITY;
                for mean in means.values() {
                    let diff = z - mean;
                    best = best.min(cov.quad(&diff));
                }
                Ok(-best)
            }
            _ => Err(Error::Config(
                "mahalanobis_score requires a shared-covariance model".into(),
            )),
        }
    }
}

/// Fits the configured per-class model from pre-split class matrices.
pub fn fit_class_conditional(
    groups: &[(usize, DMatrix<f64>)],
    cfg: &DensityConfig,
) -> Result<ClassConditionalModel> {
    if groups.is_empty() {
        return Err(Error::InsufficientSamples("no classes to fit".into()));
    }
    for (k, xk) in groups {
        if xk.nrows() < 2 {
            return Err(Error::InsufficientSamples(format!(
                "class {k} has {} samples, need at least 2",
                xk.nrows()
            )));
        }
    }
    let d = groups[0].1.ncols();
    if let Some((_, xk)) = groups.iter().find(|(_, xk)| xk.ncols() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: xk.ncols(),
        });
    }

    match cfg.kind {
        DensityKind::SharedGaussian => {
            let mut means = BTreeMap::new();
            let mut pooled = DMatrix::zeros(d, d);
            let mut total = 0usize;
            for (k, xk) in groups {
                let (mean, scatter) = mean_and_scatter(xk)?;
                let mk = xk.nrows();
                pooled += scatter * mk as f64;
                total += mk;
                means.insert(*k, mean);
            }
            pooled /= total as f64;
            let cov = CovCache::new(regularize_additive(pooled, cfg.reg))?;
            Ok(ClassConditionalModel::Shared { means, cov })
        }
        DensityKind::SeparateGaussian => {
            let fitted: Result<Vec<(usize, GaussianComponent)>> = groups
                .par_iter()
                .map(|(k, xk)| {
                    if xk.nrows() < d + 1 {
                        log::warn!(
                            "class {k}: {} samples for {d}-dim covariance; estimate may be poor",
                            xk.nrows()
                        );
                    }
                    Ok((*k, fit_gaussian(xk, cfg.reg)?))
                })
                .collect();
            Ok(ClassConditionalModel::Separate {
                classes: fitted?.into_iter().collect(),
            })
        }
        DensityKind::Gmm => {
            let fitted: Result<Vec<(usize, GmmFit)>> = groups
                .par_iter()
                .map(|(k, xk)| {
                    let fit = fit_gmm(
                        xk,
                        cfg.gmm_k_max,
                        cfg.gmm_restarts,
                        crate::rng::subseed(cfg.seed, &format!("gmm.class.{k}")),
                        cfg.reg,
                    )?;
                    Ok((*k, fit))
                })
                .collect();
            let mut classes = BTreeMap::new();
            let mut meta = BTreeMap::new();
            for (k, fit) in fitted? {
                classes.insert(k, fit.mixture);
                meta.insert(k, fit.meta);
            }
            Ok(ClassConditionalModel::Gmm { classes, meta })
        }
    }
}

/// Model-selection record kept alongside a fitted per-class GMM.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmMeta {
    pub selected_k: usize,
    pub final_log_likelihood: f64,
    /// (component count, best log-likelihood, BIC); skipped counts are absent.
    pub bic_table: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub mixture: MixtureDensity,
    pub meta: GmmMeta,
    /// Per-iteration training log-likelihood of every EM run, in run order.
    pub ll_traces: Vec<Vec<f64>>,
}

/// Fits GMMs for component counts 1..=k_max with seeded restarts, keeps the
/// best log-likelihood per count, and selects the count minimizing
/// BIC = p ln M - 2 lnL with p = k-1 + k d + k d(d+1)/2.
pub fn fit_gmm(
    x: &DMatrix<f64>,
    k_max: usize,
    restarts: usize,
    seed: u64,
    reg: f64,
) -> Result<GmmFit> {
    let m = x.nrows();
    let d = x.ncols();
    if k_max == 0 || restarts == 0 {
        return Err(Error::Config("gmm needs k_max >= 1 and restarts >= 1".into()));
    }
    if m < 2 * k_max {
        return Err(Error::InsufficientSamples(format!(
            "gmm with k_max={k_max} needs at least {} samples, got {m}",
            2 * k_max
        )));
    }

    let (_, global_scatter) = mean_and_scatter(x)?;
    let mut floor = reg * global_scatter.trace() / d as f64;
    if !(floor > 0.0) {
        floor = reg;
    }
    let init_cov = clamp_eigenvalues(&global_scatter, floor);

    let mut ll_traces = Vec::new();
    let mut bic_table = Vec::new();
    let mut best: Option<(f64, MixtureDensity, usize, f64)> = None; // (bic, mixture, k, lnl)

    for k in 1..=k_max {
        let mut best_run: Option<(f64, MixtureDensity)> = None;
        for r in 0..restarts {
            let mut rng = rng_for(seed, &format!("em.k{k}.restart{r}"));
            match em_run(x, k, floor, &init_cov, &mut rng) {
                Ok((mixture, trace)) => {
                    let lnl = *trace.last().unwrap();
                    ll_traces.push(trace);
                    if best_run.as_ref().map(|(l, _)| lnl > *l).unwrap_or(true) {
                        best_run = Some((lnl, mixture));
                    }
                }
                Err(e) => {
                    log::warn!("em run k={k} restart={r} failed: {e}");
                }
            }
        }
        let Some((lnl, mixture)) = best_run else {
            continue; // every restart failed; skip this component count
        };
        let p = (k - 1) + k * d + k * d * (d + 1) / 2;
        let bic = p as f64 * (m as f64).ln() - 2.0 * lnl;
        bic_table.push((k, lnl, bic));
        let better = match &best {
            Some((b, _, _, _)) => bic < *b,
            None => true,
        };
        if better {
            best = Some((bic, mixture, k, lnl));
        }
    }

    let (_, mixture, selected_k, final_lnl) =
        best.ok_or_else(|| Error::Numerical("EM failed for every component count".into()))?;
    Ok(GmmFit {
        mixture,
        meta: GmmMeta {
            selected_k,
            final_log_likelihood: final_lnl,
            bic_table,
        },
        ll_traces,
    })
}

/// One EM run. Means seeded k-means++ style from data points, covariances
/// start at the (eigenvalue-floored) global covariance, weights uniform.
fn em_run(
    x: &DMatrix<f64>,
    k: usize,
    floor: f64,
    init_cov: &DMatrix<f64>,
    rng: &mut impl Rng,
) -> Result<(MixtureDensity, Vec<f64>)> {
    let m = x.nrows();
    let d = x.ncols();

    let mean_seeds = kmeanspp_seeds(x, k, rng);
    let mut weights = vec![1.0 / k as f64; k];
    let mut comps: Vec<GaussianComponent> = mean_seeds
        .into_iter()
        .map(|mean| GaussianComponent::new(mean, init_cov.clone()))
        .collect::<Result<_>>()?;

    let mut trace = Vec::new();
    let mut log_resp = DMatrix::zeros(m, k);
    let mut prev_lnl = f64::NEG_INFINITY;

    for _iter in 0..EM_MAX_ITER {
        // E step and current log-likelihood.
        let mut lnl = 0.0;
        for i in 0..m {
            let zi = x.row(i).transpose();
            let mut terms = Vec::with_capacity(k);
            for j in 0..k {
                let t = if weights[j] > 0.0 {
                    weights[j].ln() + comps[j].log_density(&zi)?
                } else {
                    f64::NEG_INFINITY
                };
                terms.push(t);
                log_resp[(i, j)] = t;
            }
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(Error::Numerical("non-finite likelihood in EM".into()));
            }
            for j in 0..k {
                log_resp[(i, j)] -= lse;
            }
            lnl += lse;
        }
        trace.push(lnl);
        if prev_lnl.is_finite() && lnl - prev_lnl < EM_TOL {
            break;
        }
        prev_lnl = lnl;

        // M step.
        for j in 0..k {
            let mut nj = 0.0;
            for i in 0..m {
                nj += log_resp[(i, j)].exp();
            }
            if nj <= 1e-10 {
                // Dying component: freeze its parameters. Keeping the old
                // values preserves the generalized-EM ascent property.
                weights[j] = nj / m as f64;
                continue;
            }
            let mut mean = DVector::zeros(d);
            for i in 0..m {
                mean += x.row(i).transpose() * log_resp[(i, j)].exp();
            }
            mean /= nj;
            let mut scatter = DMatrix::zeros(d, d);
            for i in 0..m {
                let diff = x.row(i).transpose() - &mean;
                scatter += &diff * diff.transpose() * log_resp[(i, j)].exp();
            }
            scatter /= nj;
            weights[j] = nj / m as f64;
            comps[j] = GaussianComponent::new(mean, clamp_eigenvalues(&scatter, floor))?;
        }
        let wsum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= wsum;
        }
    }

    Ok((
        MixtureDensity {
            weights,
            components: comps,
        },
        trace,
    ))
}

/// k-means++ seeding: first mean uniform, then data points sampled with
/// probability proportional to squared distance from the chosen means.
fn kmeanspp_seeds(x: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let m = x.nrows();
    let mut seeds: Vec<DVector<f64>> = Vec::with_capacity(k);
    seeds.push(x.row(rng.random_range(0..m)).transpose());
    let mut dist2 = vec![0.0f64; m];
    while seeds.len() < k {
        let last = seeds.last().unwrap();
        let mut total = 0.0;
        for i in 0..m {
            let di = (x.row(i).transpose() - last).norm_squared();
            if seeds.len() == 1 || di < dist2[i] {
                dist2[i] = di;
            }
            total += dist2[i];
        }
        if total <= 0.0 {
            // All points coincide with a seed; fall back to uniform.
            seeds.push(x.row(rng.random_range(0..m)).transpose());
            continue;
        }
        let mut target = rng.random::<f64>() * total;
        let mut chosen = m - 1;
        for i in 0..m {
            target -= dist2[i];
            if target <= 0.0 {
                chosen = i;
                break;
            }
        }
        seeds.push(x.row(chosen).transpose());
    }
    seeds
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    use crate::rng::rng_for;

    fn standard_normal_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_for(seed, "density.test");
        DMatrix::from_fn(rows, cols, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    }

    #[test]
    fn gaussian_fit_symmetric_corners() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        let g = fit_gaussian(&x, 0.0).unwrap();
        assert_relative_eq!(g.mean[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.mean[1], 1.0, epsilon = 1e-12);
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!((g.covariance() - eye).abs().max() < 1e-12);
    }

    #[test]
    fn degenerate_data_regularized_to_floor() {
        let x = DMatrix::from_row_slice(
            5,
            2,
            &[3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0],
        );
        let g = fit_gaussian(&x, 1e-6).unwrap();
        // Zero scatter: floor falls back to reg * I.
        assert_relative_eq!(g.covariance()[(0, 0)], 1e-6, epsilon = 1e-18);
        assert_relative_eq!(g.covariance()[(1, 1)], 1e-6, epsilon = 1e-18);
        assert!(g.cov_cache().logdet().is_finite());
    }

    #[test]
    fn sample_covariance_close_to_truth() {
        let mut rng = rng_for(21, "density.cov");
        let x = DMatrix::from_fn(500, 2, |_, j| {
            let s = if j == 0 { 2.0 } else { 1.0 };
            s * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let g = fit_gaussian(&x, 0.0).unwrap();

        // Independent oracle: direct elementwise sample-covariance sums.
        let m = x.nrows() as f64;
        let mu0 = x.column(0).sum() / m;
        let mu1 = x.column(1).sum() / m;
        let mut direct = [[0.0f64; 2]; 2];
        for i in 0..x.nrows() {
            let d0 = x[(i, 0)] - mu0;
            let d1 = x[(i, 1)] - mu1;
            direct[0][0] += d0 * d0 / m;
            direct[0][1] += d0 * d1 / m;
            direct[1][1] += d1 * d1 / m;
        }
        assert_relative_eq!(g.covariance()[(0, 0)], direct[0][0], epsilon = 1e-10);
        assert_relative_eq!(g.covariance()[(0, 1)], direct[0][1], epsilon = 1e-10);
        assert_relative_eq!(g.covariance()[(1, 1)], direct[1][1], epsilon = 1e-10);

        // And both sit within 15% of the generating covariance diag(4, 1).
        assert!((g.covariance()[(0, 0)] - 4.0).abs() / 4.0 < 0.15);
        assert!((g.covariance()[(1, 1)] - 1.0).abs() < 0.15);
        assert!(g.covariance()[(0, 1)].abs() < 0.3);
    }

    #[test]
    fn log_density_standard_normal_at_mean() {
        let g = GaussianComponent::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let v = g.log_density(&DVector::zeros(2)).unwrap();
        assert_relative_eq!(v, -LN_2PI, epsilon = 1e-12);
    }

    #[test]
    fn log_density_hand_evaluated_diagonal_case() {
        let g = GaussianComponent::new(
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 1.0])),
        )
        .unwrap();
        let v = g
            .log_density(&DVector::from_row_slice(&[2.0, 1.0]))
            .unwrap();
        let expected = -0.5 * (2.0 * LN_2PI + 4.0f64.ln() + 2.0);
        assert_relative_eq!(v, expected, epsilon = 1e-12);
        assert_relative_eq!(v, -3.5310242469692907, epsilon = 1e-10);
    }

    #[test]
    fn mixture_of_identical_components_equals_single() {
        let g = GaussianComponent::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let single = MixtureDensity::single(g.clone());
        let double = MixtureDensity::new(vec![0.5, 0.5], vec![g.clone(), g]).unwrap();
        let z = DVector::from_row_slice(&[0.3, -1.2]);
        assert_relative_eq!(
            double.log_density(&z).unwrap(),
            single.log_density(&z).unwrap(),
            epsilon = 1e-12
        );
    }

    fn two_class_groups(seed: u64) -> Vec<(usize, DMatrix<f64>)> {
        let mut rng = rng_for(seed, "density.groups");
        let a = DMatrix::from_fn(60, 2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let b = a.clone().add_scalar(5.0);
        vec![(0, a), (1, b)]
    }

    #[test]
    fn shared_fit_on_shifted_copies_pools_exactly() {
        let groups = two_class_groups(22);
        let model = fit_class_conditional(
            &groups,
            &DensityConfig {
                kind: DensityKind::SharedGaussian,
                reg: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let class_cov = fit_gaussian(&groups[0].1, 0.0).unwrap().covariance().clone();
        match &model {
            ClassConditionalModel::Shared { cov, .. } => {
                assert!((cov.covariance() - class_cov).abs().max() < 1e-10);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn separate_fit_differs_on_heteroscedastic_classes() {
        let mut rng = rng_for(23, "density.hetero");
        let tight = DMatrix::from_fn(50, 2, |_, _| {
            0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let wide = DMatrix::from_fn(50, 2, |_, _| {
            3.0 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let model = fit_class_conditional(
            &[(0, tight), (1, wide)],
            &DensityConfig {
                kind: DensityKind::SeparateGaussian,
                ..Default::default()
            },
        )
        .unwrap();
        match &model {
            ClassConditionalModel::Separate { classes } => {
                let c0 = classes[&0].covariance()[(0, 0)];
                let c1 = classes[&1].covariance()[(0, 0)];
                assert!(c1 > 10.0 * c0);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn confidence_equals_log_density_for_single_class() {
        let x = standard_normal_matrix(40, 2, 24);
        let model = fit_class_conditional(&[(0, x)], &DensityConfig::default()).unwrap();
        let z = DVector::from_row_slice(&[0.5, -0.5]);
        assert_relative_eq!(
            model.confidence_ll(&z).unwrap(),
            model.log_density_class(0, &z).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn confidence_attained_by_nearest_class() {
        let groups = two_class_groups(25);
        let mean0 = fit_gaussian(&groups[0].1, 0.0).unwrap().mean.clone();
        let model = fit_class_conditional(&groups, &DensityConfig::default()).unwrap();
        let ll0 = model.log_density_class(0, &mean0).unwrap();
        let conf = model.confidence_ll(&mean0).unwrap();
        assert_relative_eq!(conf, ll0, epsilon = 1e-12);
    }

    #[test]
    fn mahalanobis_three_four_five() {
        let mut means = BTreeMap::new();
        means.insert(0usize, DVector::zeros(2));
        let model = ClassConditionalModel::Shared {
            means,
            cov: CovCache::new(DMatrix::identity(2, 2)).unwrap(),
        };
        let s = model
            .mahalanobis_score(&DVector::from_row_slice(&[3.0, 4.0]))
            .unwrap();
        assert_relative_eq!(s, -25.0, epsilon = 1e-12);
    }

    #[test]
    fn mahalanobis_zero_at_class_means() {
        let groups = two_class_groups(26);
        let model = fit_class_conditional(
            &groups,
            &DensityConfig {
                kind: DensityKind::SharedGaussian,
                ..Default::default()
            },
        )
        .unwrap();
        match &model {
            ClassConditionalModel::Shared { means, .. } => {
                for mean in means.values() {
                    let s = model.mahalanobis_score(mean).unwrap();
                    assert_relative_eq!(s, 0.0, epsilon = 1e-12);
                }
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn mahalanobis_requires_shared_kind() {
        let groups = two_class_groups(27);
        let model = fit_class_conditional(&groups, &DensityConfig::default()).unwrap();
        assert!(model.mahalanobis_score(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn shared_argmax_ll_equals_argmin_mahalanobis() {
        let groups = two_class_groups(28);
        let model = fit_class_conditional(
            &groups,
            &DensityConfig {
                kind: DensityKind::SharedGaussian,
                ..Default::default()
            },
        )
        .unwrap();
        let (means, cov) = match &model {
            ClassConditionalModel::Shared { means, cov } => (means, cov),
            _ => panic!("wrong kind"),
        };
        let mut rng = rng_for(29, "density.identity");
        for _ in 0..500 {
            let z = DVector::from_fn(2, |_, _| {
                6.0 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let ll_argmax = model
                .classes()
                .into_iter()
                .max_by(|&a, &b| {
                    model
                        .log_density_class(a, &z)
                        .unwrap()
                        .partial_cmp(&model.log_density_class(b, &z).unwrap())
                        .unwrap()
                })
                .unwrap();
            let mahal_argmin = means
                .iter()
                .min_by(|(_, ma), (_, mb)| {
                    cov.quad(&(&z - *ma))
                        .partial_cmp(&cov.quad(&(&z - *mb)))
                        .unwrap()
                })
                .map(|(k, _)| *k)
                .unwrap();
            assert_eq!(ll_argmax, mahal_argmin);
        }
    }

    #[test]
    fn shared_ranking_matches_confidence_ranking() {
        let groups = two_class_groups(30);
        let model = fit_class_conditional(
            &groups,
            &DensityConfig {
                kind: DensityKind::SharedGaussian,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = rng_for(31, "density.rank");
        let zs: Vec<DVector<f64>> = (0..60)
            .map(|_| {
                DVector::from_fn(2, |_, _| {
                    8.0 * rng.sample::<f64, _>(rand_distr::StandardNormal)
                })
            })
            .collect();
        let mut by_ll: Vec<usize> = (0..zs.len()).collect();
        by_ll.sort_by(|&a, &b| {
            model
                .confidence_ll(&zs[a])
                .unwrap()
                .partial_cmp(&model.confidence_ll(&zs[b]).unwrap())
                .unwrap()
        });
        let mut by_mahal: Vec<usize> = (0..zs.len()).collect();
        by_mahal.sort_by(|&a, &b| {
            model
                .mahalanobis_score(&zs[a])
                .unwrap()
                .partial_cmp(&model.mahalanobis_score(&zs[b]).unwrap())
                .unwrap()
        });
        assert_eq!(by_ll, by_mahal);
    }

    #[test]
    fn gmm_selects_one_component_for_single_cluster() {
        let x = standard_normal_matrix(200, 2, 32);
        let fit = fit_gmm(&x, 4, 3, 7, DEFAULT_REG).unwrap();
        assert_eq!(fit.meta.selected_k, 1);
        // BIC of k=1 must be the table minimum.
        let min = fit
            .meta
            .bic_table
            .iter()
            .map(|&(_, _, b)| b)
            .fold(f64::INFINITY, f64::min);
        let k1 = fit.meta.bic_table.iter().find(|&&(k, _, _)| k == 1).unwrap();
        assert_relative_eq!(k1.2, min, epsilon = 1e-9);
    }

    #[test]
    fn gmm_finds_two_well_separated_clusters() {
        let mut hits = 0;
        for seed in 0..20 {
            let mut rng = rng_for(seed, "density.gmm2");
            let x = DMatrix::from_fn(200, 2, |i, _| {
                let c = if i % 2 == 0 { 0.0 } else { 10.0 };
                c + rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let fit = fit_gmm(&x, 4, 3, seed, DEFAULT_REG).unwrap();
            if fit.meta.selected_k == 2 {
                hits += 1;
            }
        }
        assert!(hits >= 18, "selected k=2 in only {hits}/20 seeds");
    }

    #[test]
    fn em_log_likelihood_nondecreasing() {
        for seed in 0..5 {
            let mut rng = rng_for(seed, "density.mono");
            let x = DMatrix::from_fn(150, 3, |i, _| {
                let c = if i % 3 == 0 { -4.0 } else { 4.0 };
                c + rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let fit = fit_gmm(&x, 3, 2, seed, DEFAULT_REG).unwrap();
            for trace in &fit.ll_traces {
                for w in trace.windows(2) {
                    assert!(
                        w[1] >= w[0] - 1e-8,
                        "log-likelihood decreased: {} -> {}",
                        w[0],
                        w[1]
                    );
                }
            }
        }
    }

    #[test]
    fn gmm_insufficient_samples_errors() {
        let x = standard_normal_matrix(6, 2, 33);
        assert!(fit_gmm(&x, 4, 2, 0, DEFAULT_REG).is_err());
    }

    #[test]
    fn fitted_density_integrates_to_one() {
        // 1-D mixture: numerical quadrature over a wide grid.
        let mut rng = rng_for(34, "density.quad1");
        let x = DMatrix::from_fn(300, 1, |i, _| {
            let c = if i % 2 == 0 { -3.0 } else { 3.0 };
            c + rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let fit = fit_gmm(&x, 3, 2, 1, DEFAULT_REG).unwrap();
        let (lo, hi, n) = (-30.0, 30.0, 60_000);
        let h = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            let z = DVector::from_row_slice(&[lo + i as f64 * h]);
            let p = fit.mixture.log_density(&z).unwrap().exp();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += w * p * h;
        }
        assert!((integral - 1.0).abs() < 1e-3, "1-D integral {integral}");

        // 2-D Gaussian on a grid.
        let y = standard_normal_matrix(200, 2, 35);
        let g = fit_gaussian(&y, DEFAULT_REG).unwrap();
        let (lo, hi, n) = (-10.0, 10.0, 400);
        let h = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for i in 0..=n {
            for j in 0..=n {
                let z = DVector::from_row_slice(&[lo + i as f64 * h, lo + j as f64 * h]);
                let p = g.log_density(&z).unwrap().exp();
                let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
                let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
                integral += wi * wj * p * h * h;
            }
        }
        assert!((integral - 1.0).abs() < 1e-3, "2-D integral {integral}");
    }

    #[test]
    fn affine_map_shifts_log_density_by_log_det() {
        let x = standard_normal_matrix(120, 2, 36);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 1.5]);
        let log_det_a = (2.0f64 * 1.5).ln();
        let xa = &x * a.transpose();

        let g = fit_gaussian(&x, 0.0).unwrap();
        let ga = fit_gaussian(&xa, 0.0).unwrap();

        let mut rng = rng_for(37, "density.affine");
        let mut scores = Vec::new();
        let mut scores_a = Vec::new();
        for _ in 0..50 {
            let z = DVector::from_fn(2, |_, _| {
                3.0 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let za = &a * &z;
            let l = g.log_density(&z).unwrap();
            let la = ga.log_density(&za).unwrap();
            assert_relative_eq!(la, l - log_det_a, epsilon = 1e-8);
            scores.push(l);
            scores_a.push(la);
        }
        // Rankings unchanged.
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let mut order_a = order.clone();
        order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap());
        order_a.sort_by(|&i, &j| scores_a[i].partial_cmp(&scores_a[j]).unwrap());
        assert_eq!(order, order_a);
    }

    #[test]
    fn regularization_vanishes_with_reg() {
        let x = standard_normal_matrix(80, 3, 38);
        let g0 = fit_gaussian(&x, 0.0).unwrap();
        let mut prev = f64::INFINITY;
        for reg in [1e-2, 1e-4, 1e-6, 1e-9] {
            let gr = fit_gaussian(&x, reg).unwrap();
            let diff = (gr.covariance() - g0.covariance()).abs().max();
            assert!(diff < prev);
            prev = diff;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn empty_class_rejected() {
        match fit_class_conditional(&[], &DensityConfig::default()) {
            Err(Error::InsufficientSamples(_)) => {}
            other => panic!("expected InsufficientSamples, got {other:?}"),
        }
    }
}
