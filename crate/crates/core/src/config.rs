//! key=value config parsing shared by the CLI, the sweep grid, the synth
//! spec, and the sweep manifest. Lines starting with '#' and blank lines
//! are skipped; later assignments win, so flag overrides can simply be
//! appended.

use std::path::Path;

use crate::density::DensityKind;
use crate::error::{Error, Result};
use crate::linear_subspace::{ReductionCriterion, ReductionMode};
use crate::pipeline::{FitConfig, GammaSpec, ScoreFamily};

pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_kv_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    parse_kv_text(&std::fs::read_to_string(path)?)
}

/// Deduplicates by key, keeping the last assignment.
pub fn last_wins(pairs: Vec<(String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (k, v) in pairs {
        if let Some(slot) = out.iter_mut().find(|(ek, _)| *ek == k) {
            slot.1 = v;
        } else {
            out.push((k, v));
        }
    }
    out
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number '{t}' in list")))
        })
        .collect()
}

/// "variance:0.995" / "evfrac:0.9" / "dim:20"
pub fn parse_criterion(s: &str) -> Result<ReductionCriterion> {
    let (kind, value) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("criterion '{s}' must be variance:<v> or dim:<n>")))?;
    match kind.trim() {
        "variance" | "evfrac" => {
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad criterion value '{value}'")))?;
            Ok(ReductionCriterion::VarianceFraction(v))
        }
        "dim" => {
            let d: usize = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad criterion value '{value}'")))?;
            Ok(ReductionCriterion::FixedDim(d))
        }
        other => Err(Error::Config(format!("unknown criterion kind '{other}'"))),
    }
}

pub fn format_criterion(c: ReductionCriterion) -> String {
    match c {
        ReductionCriterion::VarianceFraction(v) => format!("variance:{v}"),
        ReductionCriterion::FixedDim(d) => format!("dim:{d}"),
    }
}

pub fn parse_mode(s: &str) -> Result<ReductionMode> {
    match s {
        "global" => Ok(ReductionMode::Global),
        "per_class" => Ok(ReductionMode::PerClass),
        other => Err(Error::Config(format!("unknown reduction mode '{other}'"))),
    }
}

/// "median:1.0" or "abs:0.004"
pub fn parse_gamma(s: &str) -> Result<GammaSpec> {
    let (kind, value) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("gamma '{s}' must be median:<c> or abs:<g>")))?;
    let v: f64 = value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad gamma value '{value}'")))?;
    if !(v > 0.0) {
        return Err(Error::Config(format!("gamma value must be positive, got {v}")));
    }
    match kind.trim() {
        "median" => Ok(GammaSpec::MedianMultiple(v)),
        "abs" => Ok(GammaSpec::Absolute(v)),
        other => Err(Error::Config(format!("unknown gamma kind '{other}'"))),
    }
}

/// Builds a FitConfig from key=value pairs (file contents plus overrides).
pub fn fit_config_from_kv(pairs: &[(String, String)]) -> Result<FitConfig> {
    let mut cfg = FitConfig::default();
    for (key, value) in last_wins(pairs.to_vec()) {
        match key.as_str() {
            "seed" => {
                cfg.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed '{value}'")))?
            }
            "scores" => {
                cfg.scores = value
                    .split(',')
                    .map(|t| t.trim().parse())
                    .collect::<Result<Vec<ScoreFamily>>>()?;
                if cfg.scores.is_empty() {
                    return Err(Error::Config("scores list is empty".into()));
                }
            }
            "mode" => cfg.mode = parse_mode(&value)?,
            "pca.criterion" => cfg.pca_criterion = parse_criterion(&value)?,
            "kpca.criterion" => cfg.kpca_criterion = parse_criterion(&value)?,
            "kpca.gamma" => cfg.gamma = parse_gamma(&value)?,
            "kpca.max_anchors" => {
                cfg.max_anchors = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad max_anchors '{value}'")))?
            }
            "density.kind" => cfg.density_kind = value.parse::<DensityKind>()?,
            "density.reg" => {
                cfg.density_reg = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad density.reg '{value}'")))?
            }
            "gmm.k_max" => {
                cfg.gmm_k_max = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad gmm.k_max '{value}'")))?
            }
            "gmm.restarts" => {
                cfg.gmm_restarts = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad gmm.restarts '{value}'")))?
            }
            other => return Err(Error::Config(format!("unknown fit config key '{other}'"))),
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_text_skips_comments_and_blank_lines() {
        let pairs = parse_kv_text("# comment\n\na=1\nb = two \n").unwrap();
        assert_eq!(
            pairs,
            vec![
                ("a".to_string(), "1".to_string()),
                ("b".to_string(), "two".to_string())
            ]
        );
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(parse_kv_text("just a line").is_err());
    }

    #[test]
    fn later_assignment_wins() {
        let pairs = parse_kv_text("a=1\na=2\n").unwrap();
        assert_eq!(last_wins(pairs), vec![("a".to_string(), "2".to_string())]);
    }

    #[test]
    fn fit_config_parses_and_rejects_unknown_keys() {
        let pairs = parse_kv_text(
            "seed=9\nscores=ll,pes\nmode=per_class\npca.criterion=dim:12\n\
             kpca.criterion=evfrac:0.9\nkpca.gamma=abs:0.25\ndensity.kind=gmm\n",
        )
        .unwrap();
        let cfg = fit_config_from_kv(&pairs).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.scores, vec![ScoreFamily::Ll, ScoreFamily::Pes]);
        assert_eq!(cfg.mode, ReductionMode::PerClass);
        assert_eq!(cfg.pca_criterion, ReductionCriterion::FixedDim(12));
        assert_eq!(cfg.gamma, GammaSpec::Absolute(0.25));
        assert_eq!(cfg.density_kind, DensityKind::Gmm);

        let bad = parse_kv_text("nonsense=1\n").unwrap();
        assert!(fit_config_from_kv(&bad).is_err());
    }

    #[test]
    fn criterion_round_trip() {
        for c in [
            ReductionCriterion::VarianceFraction(0.9),
            ReductionCriterion::FixedDim(7),
        ] {
            assert_eq!(parse_criterion(&format_criterion(c)).unwrap(), c);
        }
    }
}
