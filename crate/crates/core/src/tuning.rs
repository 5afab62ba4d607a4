//! Hyper-parameter selection on a hold-out auxiliary OOD set: a coarse
//! grid over subspace and density choices, scored by hold-out AUROC, with
//! one winning configuration per score family.
//!
//! The hold-out set is for selection only; final metrics must come from a
//! disjoint test set. The manifest records the hold-out sample ids so the
//! eval stage can verify disjointness.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::density::DensityKind;
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::feature_store::{split_per_class, FeatureSet};
use crate::kernel_subspace::{
    fit_kernel_bundle, median_heuristic_gamma, KernelBundle, KernelKind, KpcaParams,
};
use crate::linear_subspace::{fit_bundle, ReductionCriterion, ReductionMode, SubspaceBundle};
use crate::pipeline::{
    embed_groups, fit_reduced_density, kll_score, ll_score, project_groups, FitConfig,
    ScoreFamily,
};
use crate::rng::subseed;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub variance_fractions: Vec<f64>,
    pub gamma_multipliers: Vec<f64>,
    pub kpca_reductions: Vec<ReductionCriterion>,
    pub density_kinds: Vec<DensityKind>,
    pub modes: Vec<ReductionMode>,
    pub max_anchors: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            variance_fractions: vec![0.5, 0.8, 0.95, 0.995],
            gamma_multipliers: vec![0.1, 0.5, 1.0, 2.0],
            kpca_reductions: vec![
                ReductionCriterion::VarianceFraction(0.9),
                ReductionCriterion::VarianceFraction(0.95),
                ReductionCriterion::VarianceFraction(0.99),
            ],
            density_kinds: vec![DensityKind::SharedGaussian, DensityKind::SeparateGaussian],
            modes: vec![ReductionMode::Global, ReductionMode::PerClass],
            max_anchors: crate::kernel_subspace::DEFAULT_MAX_ANCHORS,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variance_fractions.is_empty()
            || self.gamma_multipliers.is_empty()
            || self.kpca_reductions.is_empty()
            || self.density_kinds.is_empty()
            || self.modes.is_empty()
        {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        if self.variance_fractions.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::Config("variance fractions must lie in (0, 1]".into()));
        }
        if self.gamma_multipliers.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config("gamma multipliers must be positive".into()));
        }
        Ok(())
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<GridSpec> {
        let mut grid = GridSpec::default();
        for (key, value) in crate::config::last_wins(pairs.to_vec()) {
            match key.as_str() {
                "variance_fractions" => {
                    grid.variance_fractions = crate::config::parse_f64_list(&value)?
                }
                "gamma_multipliers" => {
                    grid.gamma_multipliers = crate::config::parse_f64_list(&value)?
                }
                "kpca_reductions" => {
                    grid.kpca_reductions = value
                        .split(',')
                        .map(|t| crate::config::parse_criterion(t.trim()))
                        .collect::<Result<_>>()?
                }
                "density_kinds" => {
                    grid.density_kinds = value
                        .split(',')
                        .map(|t| t.trim().parse())
                        .collect::<Result<_>>()?
                }
                "modes" => {
                    grid.modes = value
                        .split(',')
                        .map(|t| crate::config::parse_mode(t.trim()))
                        .collect::<Result<_>>()?
                }
                "max_anchors" => {
                    grid.max_anchors = value
                        .parse()
                        .map_err(|_| Error::Config(format!("bad max_anchors '{value}'")))?
                }
                other => return Err(Error::Config(format!("unknown grid key '{other}'"))),
            }
        }
        grid.validate()?;
        Ok(grid)
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub family: ScoreFamily,
    pub mode: ReductionMode,
    pub variance_fraction: Option<f64>,
    pub gamma_multiplier: Option<f64>,
    pub gamma: Option<f64>,
    pub kpca_criterion: Option<ReductionCriterion>,
    pub density_kind: Option<DensityKind>,
    pub reduced_dim: usize,
    pub auroc: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the winning configuration per family.
    pub selected: BTreeMap<ScoreFamily, usize>,
    pub gamma_base: f64,
    pub holdout_in_ids: Vec<String>,
    pub holdout_ood_ids: Vec<String>,
    pub seed: u64,
}

struct HoldoutScores {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

fn score_each<F>(holdout_in: &FeatureSet, holdout_ood: &FeatureSet, f: F) -> Result<HoldoutScores>
where
    F: Fn(&nalgebra::DVector<f64>) -> Result<f64>,
{
    let pos = (0..holdout_in.num_samples())
        .map(|i| f(&holdout_in.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let neg = (0..holdout_ood.num_samples())
        .map(|i| f(&holdout_ood.row(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(HoldoutScores { pos, neg })
}

/// Fits every grid point on `train`, scores the hold-out pair, and selects
/// the best configuration per score family. Ties (within 1e-12 AUROC) go to
/// the smaller reduced dimension, then the lower gamma, then grid order.
pub fn sweep(
    train: &FeatureSet,
    holdout_in: &FeatureSet,
    holdout_ood: &FeatureSet,
    grid: &GridSpec,
    seed: u64,
) -> Result<SweepResult> {
    grid.validate()?;
    if holdout_in.num_samples() == 0 || holdout_ood.num_samples() == 0 {
        return Err(Error::InsufficientSamples("empty hold-out set".into()));
    }
    for fs in [holdout_in, holdout_ood] {
        if fs.dim() != train.dim() {
            return Err(Error::DimensionMismatch {
                expected: train.dim(),
                actual: fs.dim(),
            });
        }
    }
    let groups = split_per_class(train)?;
    let gamma_base = median_heuristic_gamma(&train.x, subseed(seed, "gamma"))?;

    let mut rows: Vec<SweepRow> = Vec::new();

    // Linear families: PES needs (mode, vf); LL adds the density kind.
    for &mode in &grid.modes {
        for &vf in &grid.variance_fractions {
            let criterion = ReductionCriterion::VarianceFraction(vf);
            let bundle = match fit_bundle(train, criterion, mode) {
                Ok(b) => b,
                Err(e) => {
                    for fam in [ScoreFamily::Pes, ScoreFamily::Ll] {
                        rows.push(SweepRow {
                            family: fam,
                            mode,
                            variance_fraction: Some(vf),
                            gamma_multiplier: None,
                            gamma: None,
                            kpca_criterion: None,
                            density_kind: None,
                            reduced_dim: 0,
                            auroc: None,
                            status: format!("fit failed: {e}"),
                        });
                    }
                    continue;
                }
            };
            let dim = bundle.max_dim();

            let pes = score_each(holdout_in, holdout_ood, |x| {
                Ok(-bundle.bundle_error(x)?)
            })
            .and_then(|s| auroc(&s.pos, &s.neg));
            rows.push(SweepRow {
                family: ScoreFamily::Pes,
                mode,
                variance_fraction: Some(vf),
                gamma_multiplier: None,
                gamma: None,
                kpca_criterion: None,
                density_kind: None,
                reduced_dim: dim,
                auroc: pes.as_ref().ok().copied(),
                status: pes.err().map(|e| e.to_string()).unwrap_or_else(|| "ok".into()),
            });

            for &dk in &grid.density_kinds {
                if mode == ReductionMode::PerClass && dk == DensityKind::SharedGaussian {
                    continue; // undefined combination, not a valid grid point
                }
                let row = ll_grid_point(
                    train, holdout_in, holdout_ood, &groups, &bundle, mode, vf, dk, seed,
                );
                rows.push(row);
            }
        }
    }

    // Kernel families: KPES needs (mode, gamma, reduction); KLL adds kind.
    for &mode in &grid.modes {
        for &gm in &grid.gamma_multipliers {
            let gamma = gm * gamma_base;
            for &crit in &grid.kpca_reductions {
                let params = KpcaParams {
                    kernel: KernelKind::Rbf { gamma },
                    criterion: crit,
                    max_anchors: grid.max_anchors,
                    seed: subseed(seed, "kpca.fit"),
                };
                let bundle = match fit_kernel_bundle(train, &params, mode) {
                    Ok(b) => b,
                    Err(e) => {
                        for fam in [ScoreFamily::Kpes, ScoreFamily::Kll] {
                            rows.push(SweepRow {
                                family: fam,
                                mode,
                                variance_fraction: None,
                                gamma_multiplier: Some(gm),
                                gamma: Some(gamma),
                                kpca_criterion: Some(crit),
                                density_kind: None,
                                reduced_dim: 0,
                                auroc: None,
                                status: format!("fit failed: {e}"),
                            });
                        }
                        continue;
                    }
                };
                let dim = bundle.max_dim();

                let kpes = score_each(holdout_in, holdout_ood, |x| {
                    Ok(-bundle.bundle_error(x)?.error)
                })
                .and_then(|s| auroc(&s.pos, &s.neg));
                rows.push(SweepRow {
                    family: ScoreFamily::Kpes,
                    mode,
                    variance_fraction: None,
                    gamma_multiplier: Some(gm),
                    gamma: Some(gamma),
                    kpca_criterion: Some(crit),
                    density_kind: None,
                    reduced_dim: dim,
                    auroc: kpes.as_ref().ok().copied(),
                    status: kpes.err().map(|e| e.to_string()).unwrap_or_else(|| "ok".into()),
                });

                for &dk in &grid.density_kinds {
                    if mode == ReductionMode::PerClass && dk == DensityKind::SharedGaussian {
                        continue;
                    }
                    let row = kll_grid_point(
                        holdout_in, holdout_ood, &groups, &bundle, mode, gm, gamma, crit, dk,
                        seed,
                    );
                    rows.push(row);
                }
            }
        }
    }

    if rows.iter().all(|r| r.auroc.is_none()) {
        return Err(Error::Numerical("every grid point failed to fit".into()));
    }

    let mut selected = BTreeMap::new();
    for fam in ScoreFamily::ALL {
        let mut best: Option<usize> = None;
        for (i, row) in rows.iter().enumerate() {
            if row.family != fam || row.auroc.is_none() {
                continue;
            }
            best = Some(match best {
                None => i,
                Some(j) => pick_better(&rows, i, j),
            });
        }
        if let Some(i) = best {
            selected.insert(fam, i);
        }
    }

    Ok(SweepResult {
        rows,
        selected,
        gamma_base,
        holdout_in_ids: holdout_in.row_ids(),
        holdout_ood_ids: holdout_ood.row_ids(),
        seed,
    })
}

#[allow(clippy::too_many_arguments)]
fn ll_grid_point(
    _train: &FeatureSet,
    holdout_in: &FeatureSet,
    holdout_ood: &FeatureSet,
    groups: &[(usize, nalgebra::DMatrix<f64>)],
    bundle: &SubspaceBundle,
    mode: ReductionMode,
    vf: f64,
    dk: DensityKind,
    seed: u64,
) -> SweepRow {
    let outcome: Result<f64> = (|| {
        let cfg = FitConfig {
            seed,
            density_kind: dk,
            ..Default::default()
        };
        let reduced = project_groups(bundle, groups)?;
        let density = fit_reduced_density(&reduced, mode, &cfg, "density.ll")?;
        let s = score_each(holdout_in, holdout_ood, |x| ll_score(bundle, &density, x))?;
        auroc(&s.pos, &s.neg)
    })();
    SweepRow {
        family: ScoreFamily::Ll,
        mode,
        variance_fraction: Some(vf),
        gamma_multiplier: None,
        gamma: None,
        kpca_criterion: None,
        density_kind: Some(dk),
        reduced_dim: bundle.max_dim(),
        auroc: outcome.as_ref().ok().copied(),
        status: outcome
            .err()
            .map(|e| format!("fit failed: {e}"))
            .unwrap_or_else(|| "ok".into()),
    }
}

#[allow(clippy::too_many_arguments)]
fn kll_grid_point(
    holdout_in: &FeatureSet,
    holdout_ood: &FeatureSet,
    groups: &[(usize, nalgebra::DMatrix<f64>)],
    bundle: &KernelBundle,
    mode: ReductionMode,
    gm: f64,
    gamma: f64,
    crit: ReductionCriterion,
    dk: DensityKind,
    seed: u64,
) -> SweepRow {
    let outcome: Result<f64> = (|| {
        let cfg = FitConfig {
            seed,
            density_kind: dk,
            ..Default::default()
        };
        let reduced = embed_groups(bundle, groups)?;
        let density = fit_reduced_density(&reduced, mode, &cfg, "density.kll")?;
        let s = score_each(holdout_in, holdout_ood, |x| kll_score(bundle, &density, x))?;
        auroc(&s.pos, &s.neg)
    })();
    SweepRow {
        family: ScoreFamily::Kll,
        mode,
        variance_fraction: None,
        gamma_multiplier: Some(gm),
        gamma: Some(gamma),
        kpca_criterion: Some(crit),
        density_kind: Some(dk),
        reduced_dim: bundle.max_dim(),
        auroc: outcome.as_ref().ok().copied(),
        status: outcome
            .err()
            .map(|e| format!("fit failed: {e}"))
            .unwrap_or_else(|| "ok".into()),
    }
}

/// i and j index ok rows of the same family; returns the preferred one.
fn pick_better(rows: &[SweepRow], i: usize, j: usize) -> usize {
    let (a, b) = (&rows[i], &rows[j]);
    let (aa, ba) = (a.auroc.unwrap(), b.auroc.unwrap());
    if (aa - ba).abs() > 1e-12 {
        return if aa > ba { i } else { j };
    }
    if a.reduced_dim != b.reduced_dim {
        return if a.reduced_dim < b.reduced_dim { i } else { j };
    }
    match (a.gamma, b.gamma) {
        (Some(ga), Some(gb)) if ga != gb => {
            if ga < gb {
                i
            } else {
                j
            }
        }
        _ => i.min(j), // grid order
    }
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per grid point, in evaluation order.
pub fn write_sweep_csv(path: impl AsRef<Path>, result: &SweepResult) -> Result<()> {
    let mut s = String::from(
        "family,mode,variance_fraction,gamma_multiplier,gamma,kpca_criterion,density_kind,reduced_dim,auroc,status\n",
    );
    for r in &result.rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.family,
            r.mode,
            fmt_opt(&r.variance_fraction),
            fmt_opt(&r.gamma_multiplier),
            fmt_opt(&r.gamma),
            r.kpca_criterion
                .map(crate::config::format_criterion)
                .unwrap_or_default(),
            fmt_opt(&r.density_kind),
            r.reduced_dim,
            fmt_opt(&r.auroc),
            r.status.replace(',', ";"),
        )
        .unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Selected-configuration manifest, including the hold-out sample ids that
/// the eval stage uses to enforce hold-out/test disjointness.
pub fn write_manifest(path: impl AsRef<Path>, result: &SweepResult) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "seed={}", result.seed).unwrap();
    writeln!(s, "gamma_base={}", result.gamma_base).unwrap();
    for (fam, &idx) in &result.selected {
        let r = &result.rows[idx];
        writeln!(s, "selected.{fam}.mode={}", r.mode).unwrap();
        if let Some(vf) = r.variance_fraction {
            writeln!(s, "selected.{fam}.pca.criterion=variance:{vf}").unwrap();
        }
        if let Some(g) = r.gamma {
            writeln!(s, "selected.{fam}.kpca.gamma=abs:{g}").unwrap();
        }
        if let Some(c) = r.kpca_criterion {
            writeln!(
                s,
                "selected.{fam}.kpca.criterion={}",
                crate::config::format_criterion(c)
            )
            .unwrap();
        }
        if let Some(dk) = r.density_kind {
            writeln!(s, "selected.{fam}.density.kind={dk}").unwrap();
        }
        writeln!(s, "selected.{fam}.reduced_dim={}", r.reduced_dim).unwrap();
        writeln!(s, "selected.{fam}.auroc={}", r.auroc.unwrap()).unwrap();
    }
    writeln!(s, "holdout_in_ids={}", result.holdout_in_ids.join(",")).unwrap();
    writeln!(s, "holdout_ood_ids={}", result.holdout_ood_ids.join(",")).unwrap();
    std::fs::write(path, s)?;
    Ok(())
}

/// Hold-out sample ids recorded in a sweep manifest.
pub fn manifest_holdout_ids(pairs: &[(String, String)]) -> HashSet<String> {
    let mut ids = HashSet::new();
    for (k, v) in pairs {
        if k == "holdout_in_ids" || k == "holdout_ood_ids" {
            ids.extend(v.split(',').map(|s| s.trim().to_string()));
        }
    }
    ids
}

/// Errors when any test sample id also appears in the hold-out set the
/// manifest records.
pub fn check_disjoint_from_holdout(
    manifest: &[(String, String)],
    sample_ids: &[String],
) -> Result<()> {
    let holdout = manifest_holdout_ids(manifest);
    let clashes: Vec<&String> = sample_ids.iter().filter(|id| holdout.contains(*id)).collect();
    if !clashes.is_empty() {
        return Err(Error::Config(format!(
            "{} test samples overlap the hyper-parameter hold-out set (first: {})",
            clashes.len(),
            clashes[0]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;

    use crate::rng::rng_for;

    /// Single class with high variance in dims 0..3 and unit variance in
    /// dims 3..10; OOD displaced only in the low-variance dims.
    fn low_variance_ood_data() -> (FeatureSet, FeatureSet, FeatureSet) {
        let mut rng = rng_for(200, "tuning.data");
        let scale = |j: usize| if j < 3 { 20.0f64 } else { 1.0 };
        let make = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            DMatrix::from_fn(n, 10, |_, j| {
                scale(j) * rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
        };
        let train = FeatureSet::labeled("train", make(&mut rng, 300), vec![0; 300]).unwrap();
        let hin = FeatureSet::labeled("hin", make(&mut rng, 120), vec![0; 120]).unwrap();
        let mut ood_x = make(&mut rng, 120);
        for i in 0..ood_x.nrows() {
            for j in 3..10 {
                ood_x[(i, j)] += 8.0;
            }
        }
        let hood = FeatureSet::unlabeled("hood", ood_x).unwrap();
        (train, hin, hood)
    }

    fn ll_only_grid(vfs: &[f64]) -> GridSpec {
        GridSpec {
            variance_fractions: vfs.to_vec(),
            gamma_multipliers: vec![1.0],
            kpca_reductions: vec![ReductionCriterion::VarianceFraction(0.9)],
            density_kinds: vec![DensityKind::SeparateGaussian],
            modes: vec![ReductionMode::Global],
            max_anchors: 400,
        }
    }

    #[test]
    fn single_point_grid_selects_that_point() {
        let (train, hin, hood) = low_variance_ood_data();
        let grid = ll_only_grid(&[0.995]);
        let result = sweep(&train, &hin, &hood, &grid, 1).unwrap();
        let sel = result.selected[&ScoreFamily::Ll];
        assert_eq!(result.rows[sel].variance_fraction, Some(0.995));
    }

    #[test]
    fn high_variance_fraction_wins_when_ood_lives_in_low_variance_dims() {
        let (train, hin, hood) = low_variance_ood_data();
        let grid = ll_only_grid(&[0.5, 0.995]);
        let result = sweep(&train, &hin, &hood, &grid, 2).unwrap();

        let aurocs: BTreeMap<String, f64> = result
            .rows
            .iter()
            .filter(|r| r.family == ScoreFamily::Ll)
            .map(|r| (format!("{}", r.variance_fraction.unwrap()), r.auroc.unwrap()))
            .collect();
        // 0.5 retention keeps only the high-variance dims, which carry no
        // OOD signal here.
        assert!(
            aurocs["0.995"] > aurocs["0.5"] + 0.2,
            "aurocs: {aurocs:?}"
        );
        let sel = &result.rows[result.selected[&ScoreFamily::Ll]];
        assert_eq!(sel.variance_fraction, Some(0.995));
    }

    #[test]
    fn exact_tie_prefers_smaller_reduced_dim() {
        // Two classes far apart with rank-4 structure; a huge off-subspace
        // OOD offset makes PES AUROC exactly 1.0 for both retention levels.
        let mut rng = rng_for(201, "tuning.tie");
        let n = 120;
        let x = DMatrix::from_fn(n, 12, |i, j| {
            let class_shift = if i % 2 == 0 { -30.0 } else { 30.0 };
            match j {
                0 => class_shift + rng.sample::<f64, _>(rand_distr::StandardNormal),
                1..=3 => rng.sample::<f64, _>(rand_distr::StandardNormal),
                _ => 0.0,
            }
        });
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let train = FeatureSet::labeled("train", x.clone(), labels.clone()).unwrap();
        let hin = {
            let y = DMatrix::from_fn(60, 12, |i, j| {
                let class_shift = if i % 2 == 0 { -30.0 } else { 30.0 };
                match j {
                    0 => class_shift + rng.sample::<f64, _>(rand_distr::StandardNormal),
                    1..=3 => rng.sample::<f64, _>(rand_distr::StandardNormal),
                    _ => 0.0,
                }
            });
            FeatureSet::labeled("hin", y, (0..60).map(|i| i % 2).collect()).unwrap()
        };
        let hood = {
            // Same in-subspace structure plus a dominant off-subspace shift.
            let y = DMatrix::from_fn(60, 12, |_, j| if j == 11 { 500.0 } else { 0.0 });
            FeatureSet::unlabeled("hood", y).unwrap()
        };

        let grid = GridSpec {
            variance_fractions: vec![0.5, 0.999],
            gamma_multipliers: vec![1.0],
            kpca_reductions: vec![ReductionCriterion::VarianceFraction(0.9)],
            density_kinds: vec![DensityKind::SeparateGaussian],
            modes: vec![ReductionMode::Global],
            max_anchors: 400,
        };
        let result = sweep(&train, &hin, &hood, &grid, 3).unwrap();
        let pes_rows: Vec<&SweepRow> = result
            .rows
            .iter()
            .filter(|r| r.family == ScoreFamily::Pes)
            .collect();
        assert_eq!(pes_rows.len(), 2);
        assert_eq!(pes_rows[0].auroc, Some(1.0));
        assert_eq!(pes_rows[1].auroc, Some(1.0));
        assert!(pes_rows[0].reduced_dim < pes_rows[1].reduced_dim);

        let sel = &result.rows[result.selected[&ScoreFamily::Pes]];
        assert_eq!(sel.variance_fraction, Some(0.5), "tie should go to smaller dim");
    }

    #[test]
    fn sweep_is_deterministic() {
        let (train, hin, hood) = low_variance_ood_data();
        let grid = GridSpec {
            variance_fractions: vec![0.9],
            gamma_multipliers: vec![0.5, 1.0],
            kpca_reductions: vec![ReductionCriterion::FixedDim(4)],
            density_kinds: vec![DensityKind::SeparateGaussian],
            modes: vec![ReductionMode::Global],
            max_anchors: 200,
        };
        let a = sweep(&train, &hin, &hood, &grid, 7).unwrap();
        let b = sweep(&train, &hin, &hood, &grid, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_round_trip_and_disjointness() {
        let (train, hin, hood) = low_variance_ood_data();
        let grid = ll_only_grid(&[0.9]);
        let result = sweep(&train, &hin, &hood, &grid, 4).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("manifest.cfg");
        write_manifest(&mp, &result).unwrap();
        let pairs = crate::config::parse_kv_file(&mp).unwrap();

        let ids = manifest_holdout_ids(&pairs);
        assert_eq!(
            ids.len(),
            result.holdout_in_ids.len() + result.holdout_ood_ids.len()
        );

        // Disjoint test ids pass; reusing hold-out rows fails.
        check_disjoint_from_holdout(&pairs, &["deadbeef00000000".to_string()]).unwrap();
        let leak = vec![result.holdout_in_ids[0].clone()];
        assert!(check_disjoint_from_holdout(&pairs, &leak).is_err());

        let csv_path = dir.path().join("sweep.csv");
        write_sweep_csv(&csv_path, &result).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("family,mode,"));
        assert_eq!(text.lines().count(), result.rows.len() + 1);
    }

    #[test]
    fn per_class_shared_combination_is_skipped() {
        let mut rng = rng_for(202, "tuning.skip");
        let x = DMatrix::from_fn(80, 6, |i, _| {
            (i % 2) as f64 * 10.0 + rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let labels: Vec<usize> = (0..80).map(|i| i % 2).collect();
        let train = FeatureSet::labeled("t", x.clone(), labels).unwrap();
        let hin = FeatureSet::unlabeled("hin", x.clone()).unwrap();
        let mut ood = x.clone();
        for v in ood.iter_mut() {
            *v += 100.0;
        }
        let hood = FeatureSet::unlabeled("hood", ood).unwrap();

        let grid = GridSpec {
            variance_fractions: vec![0.9],
            gamma_multipliers: vec![1.0],
            kpca_reductions: vec![ReductionCriterion::FixedDim(2)],
            density_kinds: vec![DensityKind::SharedGaussian, DensityKind::SeparateGaussian],
            modes: vec![ReductionMode::Global, ReductionMode::PerClass],
            max_anchors: 100,
        };
        let result = sweep(&train, &hin, &hood, &grid, 5).unwrap();
        assert!(!result.rows.iter().any(|r| {
            r.mode == ReductionMode::PerClass
                && r.density_kind == Some(DensityKind::SharedGaussian)
        }));
        // per_class+separate rows do exist.
        assert!(result.rows.iter().any(|r| {
            r.mode == ReductionMode::PerClass
                && r.density_kind == Some(DensityKind::SeparateGaussian)
        }));
    }
}
