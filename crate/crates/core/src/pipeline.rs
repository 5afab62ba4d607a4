//! Fit/score orchestration: builds the configured subspaces and densities
//! from a labeled training set and turns test features into the five score
//! columns (mahal, ll, pes, kll, kpes).
//!
//! Score orientation is uniform: higher = more in-distribution, so the
//! reconstruction-error families are negated on their way into a table.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::density::{
    fit_class_conditional, fit_gaussian, fit_gmm, ClassConditionalModel, DensityConfig,
    DensityKind, MixtureDensity,
};
use crate::error::{Error, Result};
use crate::eval::ScoreTable;
use crate::feature_store::{split_per_class, FeatureSet};
use crate::kernel_subspace::{
    fit_kernel_bundle, median_heuristic_gamma, KernelBundle, KernelKind, KpcaParams,
    DEFAULT_MAX_ANCHORS,
};
use crate::linear_subspace::{
    fit_bundle, ReductionCriterion, ReductionMode, SubspaceBundle, DEFAULT_VARIANCE_RETENTION,
};
use crate::rng::subseed;

/// The five confidence-score families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ScoreFamily {
    Mahal,
    Ll,
    Pes,
    Kll,
    Kpes,
}

impl ScoreFamily {
    pub const ALL: [ScoreFamily; 5] = [
        ScoreFamily::Mahal,
        ScoreFamily::Ll,
        ScoreFamily::Pes,
        ScoreFamily::Kll,
        ScoreFamily::Kpes,
    ];

    pub fn needs_linear(self) -> bool {
        matches!(self, ScoreFamily::Ll | ScoreFamily::Pes)
    }

    pub fn needs_kernel(self) -> bool {
        matches!(self, ScoreFamily::Kll | ScoreFamily::Kpes)
    }
}

impl std::fmt::Display for ScoreFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreFamily::Mahal => write!(f, "mahal"),
            ScoreFamily::Ll => write!(f, "ll"),
            ScoreFamily::Pes => write!(f, "pes"),
            ScoreFamily::Kll => write!(f, "kll"),
            ScoreFamily::Kpes => write!(f, "kpes"),
        }
    }
}

impl std::str::FromStr for ScoreFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahal" => Ok(ScoreFamily::Mahal),
            "ll" => Ok(ScoreFamily::Ll),
            "pes" => Ok(ScoreFamily::Pes),
            "kll" => Ok(ScoreFamily::Kll),
            "kpes" => Ok(ScoreFamily::Kpes),
            other => Err(Error::Config(format!("unknown score family '{other}'"))),
        }
    }
}

/// RBF width: absolute, or a multiple of the median-heuristic base width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaSpec {
    Absolute(f64),
    MedianMultiple(f64),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub seed: u64,
    pub scores: Vec<ScoreFamily>,
    pub mode: ReductionMode,
    pub pca_criterion: ReductionCriterion,
    pub kpca_criterion: ReductionCriterion,
    pub gamma: GammaSpec,
    pub max_anchors: usize,
    pub density_kind: DensityKind,
    pub density_reg: f64,
    pub gmm_k_max: usize,
    pub gmm_restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            seed: 0,
            scores: ScoreFamily::ALL.to_vec(),
            mode: ReductionMode::Global,
            pca_criterion: ReductionCriterion::VarianceFraction(DEFAULT_VARIANCE_RETENTION),
            kpca_criterion: ReductionCriterion::VarianceFraction(0.9),
            gamma: GammaSpec::MedianMultiple(1.0),
            max_anchors: DEFAULT_MAX_ANCHORS,
            density_kind: DensityKind::SeparateGaussian,
            density_reg: crate::density::DEFAULT_REG,
            gmm_k_max: crate::density::DEFAULT_GMM_K_MAX,
            gmm_restarts: crate::density::DEFAULT_GMM_RESTARTS,
        }
    }
}

/// Class-conditional densities over a reduced space. Global mode keeps one
/// model over the common embedding; per-class mode pairs each class's
/// density with that class's own subspace.
#[derive(Debug, Clone, PartialEq)]
pub enum ReducedDensity {
    Global(ClassConditionalModel),
    PerClass(BTreeMap<usize, MixtureDensity>),
}

/// Everything `cmd fit` produces and `cmd score` consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub layer_id: String,
    pub seed: u64,
    pub linear: Option<SubspaceBundle>,
    pub kernel: Option<KernelBundle>,
    pub ll_density: Option<ReducedDensity>,
    pub kll_density: Option<ReducedDensity>,
    /// Shared-covariance Gaussian over the raw feature space.
    pub mahal: Option<ClassConditionalModel>,
    pub meta: Vec<(String, String)>,
    pub manifest: Option<String>,
}

impl FittedModel {
    pub fn families(&self) -> Vec<ScoreFamily> {
        let mut out = Vec::new();
        if self.mahal.is_some() {
            out.push(ScoreFamily::Mahal);
        }
        if self.ll_density.is_some() {
            out.push(ScoreFamily::Ll);
        }
        if self.linear.is_some() {
            out.push(ScoreFamily::Pes);
        }
        if self.kll_density.is_some() {
            out.push(ScoreFamily::Kll);
        }
        if self.kernel.is_some() {
            out.push(ScoreFamily::Kpes);
        }
        out
    }

    pub fn ambient_dim(&self) -> Option<usize> {
        if let Some(SubspaceBundle::Global(s)) = &self.linear {
            return Some(s.ambient_dim());
        }
        if let Some(SubspaceBundle::PerClass(map)) = &self.linear {
            return map.values().next().map(|s| s.ambient_dim());
        }
        match &self.kernel {
            Some(KernelBundle::Global(s)) => return Some(s.ambient_dim()),
            Some(KernelBundle::PerClass(map)) => {
                return map.values().next().map(|s| s.ambient_dim())
            }
            None => {}
        }
        self.mahal.as_ref().map(|m| m.dim())
    }
}

pub(crate) fn project_groups(
    bundle: &SubspaceBundle,
    groups: &[(usize, DMatrix<f64>)],
) -> Result<Vec<(usize, DMatrix<f64>)>> {
    match bundle {
        SubspaceBundle::Global(s) => groups
            .iter()
            .map(|(k, xk)| {
                let mut zk = DMatrix::zeros(xk.nrows(), s.dim());
                for i in 0..xk.nrows() {
                    let z = s.project(&xk.row(i).transpose())?;
                    zk.row_mut(i).copy_from(&z.transpose());
                }
                Ok((*k, zk))
            })
            .collect(),
        SubspaceBundle::PerClass(map) => groups
            .iter()
            .map(|(k, xk)| {
                let s = map
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("no subspace for class {k}")))?;
                let mut zk = DMatrix::zeros(xk.nrows(), s.dim());
                for i in 0..xk.nrows() {
                    let z = s.project(&xk.row(i).transpose())?;
                    zk.row_mut(i).copy_from(&z.transpose());
                }
                Ok((*k, zk))
            })
            .collect(),
    }
}

pub(crate) fn embed_groups(
    bundle: &KernelBundle,
    groups: &[(usize, DMatrix<f64>)],
) -> Result<Vec<(usize, DMatrix<f64>)>> {
    match bundle {
        KernelBundle::Global(s) => groups
            .iter()
            .map(|(k, xk)| Ok((*k, s.embed_rows(xk)?)))
            .collect(),
        KernelBundle::PerClass(map) => groups
            .iter()
            .map(|(k, xk)| {
                let s = map
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("no kernel subspace for class {k}")))?;
                Ok((*k, s.embed_rows(xk)?))
            })
            .collect(),
    }
}

/// Fits one class's density in its own reduced space.
fn fit_single_class_density(
    zk: &DMatrix<f64>,
    class: usize,
    cfg: &FitConfig,
) -> Result<MixtureDensity> {
    match cfg.density_kind {
        DensityKind::SharedGaussian => Err(Error::Config(
            "shared covariance is undefined across per-class subspaces; \
             use separate or gmm in per_class mode"
                .into(),
        )),
        DensityKind::SeparateGaussian => Ok(MixtureDensity::single(fit_gaussian(
            zk,
            cfg.density_reg,
        )?)),
        DensityKind::Gmm => Ok(fit_gmm(
            zk,
            cfg.gmm_k_max,
            cfg.gmm_restarts,
            subseed(cfg.seed, &format!("gmm.perclass.{class}")),
            cfg.density_reg,
        )?
        .mixture),
    }
}

pub(crate) fn fit_reduced_density(
    reduced_groups: &[(usize, DMatrix<f64>)],
    mode: ReductionMode,
    cfg: &FitConfig,
    label: &str,
) -> Result<ReducedDensity> {
    match mode {
        ReductionMode::Global => {
            let dc = DensityConfig {
                kind: cfg.density_kind,
                reg: cfg.density_reg,
                gmm_k_max: cfg.gmm_k_max,
                gmm_restarts: cfg.gmm_restarts,
                seed: subseed(cfg.seed, label),
            };
            Ok(ReducedDensity::Global(fit_class_conditional(
                reduced_groups,
                &dc,
            )?))
        }
        ReductionMode::PerClass => {
            let fitted: Result<Vec<(usize, MixtureDensity)>> = reduced_groups
                .par_iter()
                .map(|(k, zk)| Ok((*k, fit_single_class_density(zk, *k, cfg)?)))
                .collect();
            Ok(ReducedDensity::PerClass(fitted?.into_iter().collect()))
        }
    }
}

/// Fits all requested score families on a labeled training set.
pub fn fit(train: &FeatureSet, cfg: &FitConfig) -> Result<FittedModel> {
    if train.labels.is_none() {
        return Err(Error::LabelsRequired(
            "model fitting needs class labels".into(),
        ));
    }
    if cfg.scores.is_empty() {
        return Err(Error::Config("no score families requested".into()));
    }
    let groups = split_per_class(train)?;
    for (k, xk) in &groups {
        if xk.nrows() < 2 {
            return Err(Error::InsufficientSamples(format!(
                "class {k} has {} samples, need at least 2",
                xk.nrows()
            )));
        }
    }

    let mut meta: Vec<(String, String)> = vec![
        ("layer_id".into(), train.layer_id.clone()),
        ("seed".into(), cfg.seed.to_string()),
        ("mode".into(), cfg.mode.to_string()),
        ("density.kind".into(), cfg.density_kind.to_string()),
    ];

    let need_linear = cfg.scores.iter().any(|s| s.needs_linear());
    let linear = if need_linear {
        let bundle = fit_bundle(train, cfg.pca_criterion, cfg.mode)?;
        meta.push(("pca.max_dim".into(), bundle.max_dim().to_string()));
        if let SubspaceBundle::Global(s) = &bundle {
            meta.push((
                "pca.variance_retained".into(),
                format!("{}", s.variance_retained()),
            ));
        }
        Some(bundle)
    } else {
        None
    };

    let need_kernel = cfg.scores.iter().any(|s| s.needs_kernel());
    let kernel = if need_kernel {
        let gamma = match cfg.gamma {
            GammaSpec::Absolute(g) => g,
            GammaSpec::MedianMultiple(c) => {
                c * median_heuristic_gamma(&train.x, subseed(cfg.seed, "gamma"))?
            }
        };
        meta.push(("kpca.gamma".into(), format!("{gamma}")));
        let params = KpcaParams {
            kernel: KernelKind::Rbf { gamma },
            criterion: cfg.kpca_criterion,
            max_anchors: cfg.max_anchors,
            seed: subseed(cfg.seed, "kpca.fit"),
        };
        let bundle = fit_kernel_bundle(train, &params, cfg.mode)?;
        meta.push(("kpca.max_dim".into(), bundle.max_dim().to_string()));
        Some(bundle)
    } else {
        None
    };

    let ll_density = if cfg.scores.contains(&ScoreFamily::Ll) {
        let reduced = project_groups(linear.as_ref().unwrap(), &groups)?;
        Some(fit_reduced_density(&reduced, cfg.mode, cfg, "density.ll")?)
    } else {
        None
    };

    let kll_density = if cfg.scores.contains(&ScoreFamily::Kll) {
        let reduced = embed_groups(kernel.as_ref().unwrap(), &groups)?;
        Some(fit_reduced_density(&reduced, cfg.mode, cfg, "density.kll")?)
    } else {
        None
    };

    let mahal = if cfg.scores.contains(&ScoreFamily::Mahal) {
        let dc = DensityConfig {
            kind: DensityKind::SharedGaussian,
            reg: cfg.density_reg,
            gmm_k_max: cfg.gmm_k_max,
            gmm_restarts: cfg.gmm_restarts,
            seed: subseed(cfg.seed, "density.mahal"),
        };
        Some(fit_class_conditional(&groups, &dc)?)
    } else {
        None
    };

    Ok(FittedModel {
        layer_id: train.layer_id.clone(),
        seed: cfg.seed,
        linear,
        kernel,
        ll_density,
        kll_density,
        mahal,
        meta,
        manifest: None,
    })
}

pub(crate) fn ll_score(
    linear: &SubspaceBundle,
    density: &ReducedDensity,
    x: &DVector<f64>,
) -> Result<f64> {
    match (linear, density) {
        (SubspaceBundle::Global(s), ReducedDensity::Global(model)) => {
            model.confidence_ll(&s.project(x)?)
        }
        (SubspaceBundle::PerClass(map), ReducedDensity::PerClass(densities)) => {
            let mut best = f64::NEG_INFINITY;
            for (k, s) in map {
                let m = densities
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("no density for class {k}")))?;
                best = best.max(m.log_density(&s.project(x)?)?);
            }
            Ok(best)
        }
        _ => Err(Error::Config(
            "subspace bundle and density model use different modes".into(),
        )),
    }
}

pub(crate) fn kll_score(
    kernel: &KernelBundle,
    density: &ReducedDensity,
    x: &DVector<f64>,
) -> Result<f64> {
    match (kernel, density) {
        (KernelBundle::Global(s), ReducedDensity::Global(model)) => {
            model.confidence_ll(&s.kproject(x)?)
        }
        (KernelBundle::PerClass(map), ReducedDensity::PerClass(densities)) => {
            let mut best = f64::NEG_INFINITY;
            for (k, s) in map {
                let m = densities
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("no density for class {k}")))?;
                best = best.max(m.log_density(&s.kproject(x)?)?);
            }
            Ok(best)
        }
        _ => Err(Error::Config(
            "kernel bundle and density model use different modes".into(),
        )),
    }
}

/// Scores every row of `features` for the requested families (default: all
/// the model carries). Columns keep the fixed mahal, ll, pes, kll, kpes
/// order; error families are negated so higher always means in-distribution.
pub fn score(
    model: &FittedModel,
    features: &FeatureSet,
    requested: Option<&[ScoreFamily]>,
) -> Result<ScoreTable> {
    if let Some(d) = model.ambient_dim() {
        if features.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: features.dim(),
            });
        }
    }
    let available = model.families();
    let families: Vec<ScoreFamily> = match requested {
        Some(req) => {
            for f in req {
                if !available.contains(f) {
                    return Err(Error::MissingSection(format!(
                        "model has no section for score family '{f}'"
                    )));
                }
            }
            let mut v = req.to_vec();
            v.sort();
            v.dedup();
            v
        }
        None => available,
    };
    if families.is_empty() {
        return Err(Error::Config("no score families available".into()));
    }

    struct RowScores {
        values: Vec<f64>,
        kpes_failed: bool,
    }

    let rows: Result<Vec<RowScores>> = (0..features.num_samples())
        .into_par_iter()
        .map(|i| {
            let x = features.row(i);
            let mut values = Vec::with_capacity(families.len());
            let mut kpes_failed = false;
            for fam in &families {
                let v = match fam {
                    ScoreFamily::Mahal => model
                        .mahal
                        .as_ref()
                        .expect("family checked")
                        .mahalanobis_score(&x)?,
                    ScoreFamily::Ll => ll_score(
                        model.linear.as_ref().expect("family checked"),
                        model.ll_density.as_ref().expect("family checked"),
                        &x,
                    )?,
                    ScoreFamily::Pes => {
                        -model.linear.as_ref().expect("family checked").bundle_error(&x)?
                    }
                    ScoreFamily::Kll => kll_score(
                        model.kernel.as_ref().expect("family checked"),
                        model.kll_density.as_ref().expect("family checked"),
                        &x,
                    )?,
                    ScoreFamily::Kpes => {
                        let s = model
                            .kernel
                            .as_ref()
                            .expect("family checked")
                            .bundle_error(&x)?;
                        if !s.converged {
                            kpes_failed = true;
                        }
                        -s.error
                    }
                };
                values.push(v);
            }
            Ok(RowScores { values, kpes_failed })
        })
        .collect();
    let rows = rows?;

    let failed = rows.iter().filter(|r| r.kpes_failed).count();
    if failed > 0 {
        log::warn!(
            "kpes pre-image search did not converge for {failed}/{} samples; \
             scores remain finite",
            rows.len()
        );
    }

    let mut table = ScoreTable::new(features.row_ids(), vec![true; features.num_samples()])?;
    for (j, fam) in families.iter().enumerate() {
        table.add_column(fam.to_string(), rows.iter().map(|r| r.values[j]).collect())?;
    }
    Ok(table)
}
