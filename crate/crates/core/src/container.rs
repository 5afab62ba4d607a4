//! "DFMM" model container: magic, version, section table, then per-section
//! binary payloads. Sections are tagged with a kind and the layer id; all
//! numeric payloads are f64 little-endian, so a container round-trips
//! bit-exactly.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::codec::*;
use crate::density::{ClassConditionalModel, CovCache, GaussianComponent, GmmMeta, MixtureDensity};
use crate::error::{Error, Result};
use crate::kernel_subspace::{KernelBundle, KernelKind, KernelSubspace};
use crate::linear_subspace::LinearSubspace;
use crate::pipeline::{FittedModel, ReducedDensity};

pub const MODEL_MAGIC: &[u8; 4] = b"DFMM";
pub const MODEL_VERSION: u32 = 1;

const SECTION_META: u8 = 1;
const SECTION_LINEAR: u8 = 2;
const SECTION_KERNEL: u8 = 3;
const SECTION_LL_DENSITY: u8 = 4;
const SECTION_KLL_DENSITY: u8 = 5;
const SECTION_MAHAL: u8 = 6;
const SECTION_MANIFEST: u8 = 7;

// ---------------------------------------------------------------------------
// primitive payload encodings
// ---------------------------------------------------------------------------

fn write_vector<W: Write>(w: &mut W, v: &DVector<f64>) -> Result<()> {
    write_u64(w, v.len() as u64)?;
    for &x in v.iter() {
        write_f64(w, x)?;
    }
    Ok(())
}

fn read_vector<R: Read>(r: &mut R) -> Result<DVector<f64>> {
    let n = read_u64(r)? as usize;
    Ok(DVector::from_vec(read_f64_vec(r, n)?))
}

fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    write_u64(w, m.nrows() as u64)?;
    write_u64(w, m.ncols() as u64)?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            write_f64(w, m[(i, j)])?;
        }
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let data = read_f64_vec(r, rows * cols)?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn write_subspace<W: Write>(w: &mut W, s: &LinearSubspace) -> Result<()> {
    write_vector(w, s.mean())?;
    write_matrix(w, s.components())?;
    write_vector(w, s.spectrum())?;
    write_f64(w, s.variance_retained())
}

fn read_subspace<R: Read>(r: &mut R) -> Result<LinearSubspace> {
    let mean = read_vector(r)?;
    let components = read_matrix(r)?;
    let spectrum = read_vector(r)?;
    let variance_retained = read_f64(r)?;
    Ok(LinearSubspace::from_parts(
        mean,
        components,
        spectrum,
        variance_retained,
    ))
}

fn write_linear_bundle<W: Write>(w: &mut W, b: &crate::linear_subspace::SubspaceBundle) -> Result<()> {
    use crate::linear_subspace::SubspaceBundle;
    match b {
        SubspaceBundle::Global(s) => {
            write_u8(w, 0)?;
            write_subspace(w, s)
        }
        SubspaceBundle::PerClass(map) => {
            write_u8(w, 1)?;
            write_u32(w, map.len() as u32)?;
            for (k, s) in map {
                write_u32(w, *k as u32)?;
                write_subspace(w, s)?;
            }
            Ok(())
        }
    }
}

fn read_linear_bundle<R: Read>(r: &mut R) -> Result<crate::linear_subspace::SubspaceBundle> {
    use crate::linear_subspace::SubspaceBundle;
    match read_u8(r)? {
        0 => Ok(SubspaceBundle::Global(read_subspace(r)?)),
        1 => {
            let n = read_u32(r)? as usize;
            let mut map = BTreeMap::new();
            for _ in 0..n {
                let k = read_u32(r)? as usize;
                map.insert(k, read_subspace(r)?);
            }
            Ok(SubspaceBundle::PerClass(map))
        }
        other => Err(Error::Format(format!("bad bundle mode tag {other}"))),
    }
}

fn write_kernel_kind<W: Write>(w: &mut W, k: KernelKind) -> Result<()> {
    match k {
        KernelKind::Rbf { gamma } => {
            write_u8(w, 0)?;
            write_f64(w, gamma)
        }
        KernelKind::Linear => write_u8(w, 1),
    }
}

fn read_kernel_kind<R: Read>(r: &mut R) -> Result<KernelKind> {
    match read_u8(r)? {
        0 => Ok(KernelKind::Rbf {
            gamma: read_f64(r)?,
        }),
        1 => Ok(KernelKind::Linear),
        other => Err(Error::Format(format!("bad kernel kind tag {other}"))),
    }
}

fn write_kernel_subspace<W: Write>(w: &mut W, s: &KernelSubspace) -> Result<()> {
    write_matrix(w, s.anchors())?;
    write_kernel_kind(w, s.kernel())?;
    write_matrix(w, s.alphas())?;
    write_vector(w, s.eigvals())?;
    write_vector(w, s.gram_row_means())?;
    write_f64(w, s.gram_total_mean())?;
    write_u64(w, s.fit_seed())
}

fn read_kernel_subspace<R: Read>(r: &mut R) -> Result<KernelSubspace> {
    let anchors = read_matrix(r)?;
    let kernel = read_kernel_kind(r)?;
    let alphas = read_matrix(r)?;
    let eigvals = read_vector(r)?;
    let row_means = read_vector(r)?;
    let total_mean = read_f64(r)?;
    let fit_seed = read_u64(r)?;
    Ok(KernelSubspace::from_parts(
        anchors, kernel, alphas, eigvals, row_means, total_mean, fit_seed,
    ))
}

fn write_kernel_bundle<W: Write>(w: &mut W, b: &KernelBundle) -> Result<()> {
    match b {
        KernelBundle::Global(s) => {
            write_u8(w, 0)?;
            write_kernel_subspace(w, s)
        }
        KernelBundle::PerClass(map) => {
            write_u8(w, 1)?;
            write_u32(w, map.len() as u32)?;
            for (k, s) in map {
                write_u32(w, *k as u32)?;
                write_kernel_subspace(w, s)?;
            }
            Ok(())
        }
    }
}

fn read_kernel_bundle<R: Read>(r: &mut R) -> Result<KernelBundle> {
    match read_u8(r)? {
        0 => Ok(KernelBundle::Global(read_kernel_subspace(r)?)),
        1 => {
            let n = read_u32(r)? as usize;
            let mut map = BTreeMap::new();
            for _ in 0..n {
                let k = read_u32(r)? as usize;
                map.insert(k, read_kernel_subspace(r)?);
            }
            Ok(KernelBundle::PerClass(map))
        }
        other => Err(Error::Format(format!("bad kernel bundle mode tag {other}"))),
    }
}

fn write_gaussian<W: Write>(w: &mut W, g: &GaussianComponent) -> Result<()> {
    write_vector(w, &g.mean)?;
    write_matrix(w, g.covariance())
}

fn read_gaussian<R: Read>(r: &mut R) -> Result<GaussianComponent> {
    let mean = read_vector(r)?;
    let cov = read_matrix(r)?;
    GaussianComponent::new(mean, cov)
}

fn write_mixture<W: Write>(w: &mut W, m: &MixtureDensity) -> Result<()> {
    write_u32(w, m.components().len() as u32)?;
    for (wt, c) in m.weights().iter().zip(m.components()) {
        write_f64(w, *wt)?;
        write_gaussian(w, c)?;
    }
    Ok(())
}

fn read_mixture<R: Read>(r: &mut R) -> Result<MixtureDensity> {
    let n = read_u32(r)? as usize;
    let mut weights = Vec::with_capacity(n);
    let mut comps = Vec::with_capacity(n);
    for _ in 0..n {
        weights.push(read_f64(r)?);
        comps.push(read_gaussian(r)?);
    }
    MixtureDensity::new(weights, comps)
}

fn write_class_model<W: Write>(w: &mut W, m: &ClassConditionalModel) -> Result<()> {
    match m {
        ClassConditionalModel::Shared { means, cov } => {
            write_u8(w, 0)?;
            write_u32(w, means.len() as u32)?;
            for (k, mean) in means {
                write_u32(w, *k as u32)?;
                write_vector(w, mean)?;
            }
            write_matrix(w, cov.covariance())
        }
        ClassConditionalModel::Separate { classes } => {
            write_u8(w, 1)?;
            write_u32(w, classes.len() as u32)?;
            for (k, g) in classes {
                write_u32(w, *k as u32)?;
                write_gaussian(w, g)?;
            }
            Ok(())
        }
        ClassConditionalModel::Gmm { classes, meta } => {
            write_u8(w, 2)?;
            write_u32(w, classes.len() as u32)?;
            for (k, m) in classes {
                write_u32(w, *k as u32)?;
                write_mixture(w, m)?;
            }
            write_u32(w, meta.len() as u32)?;
            for (k, gm) in meta {
                write_u32(w, *k as u32)?;
                write_u32(w, gm.selected_k as u32)?;
                write_f64(w, gm.final_log_likelihood)?;
                write_u32(w, gm.bic_table.len() as u32)?;
                for &(kk, lnl, bic) in &gm.bic_table {
                    write_u32(w, kk as u32)?;
                    write_f64(w, lnl)?;
                    write_f64(w, bic)?;
                }
            }
            Ok(())
        }
    }
}

fn read_class_model<R: Read>(r: &mut R) -> Result<ClassConditionalModel> {
    match read_u8(r)? {
        0 => {
            let n = read_u32(r)? as usize;
            let mut means = BTreeMap::new();
            for _ in 0..n {
                let k = read_u32(r)? as usize;
                means.insert(k, read_vector(r)?);
            }
            let cov = CovCache::new(read_matrix(r)?)?;
            Ok(ClassConditionalModel::Shared { means, cov })
        }
        1 => {
            let n = read_u32(r)? as usize;
            let mut classes = BTreeMap::new();
            for _ in 0..n {
                let k = read_u32(r)? as usize;
                classes.insert(k, read_gaussian(r)?);
            }
            Ok(ClassConditionalModel::Separate { classes })
        }
        2 => {
            let n = read_u32(r)? as usize;
            let mut classes = BTreeMap::new();
            for _ in 0..n {
                let k = read_u32(r)? as usize;
                classes.insert(k, read_mixture(r)?);
            }
            let nm = read_u32(r)? as usize;
            let mut meta = BTreeMap::new();
            for _ in 0..nm {
                let k = read_u32(r)? as usize;
                let selected_k = read_u32(r)? as usize;
                let final_log_likelihood = read_f64(r)?;
                let rows = read_u32(r)? as usize;
                let mut bic_table = Vec::with_capacity(rows);
                for _ in 0..rows {
                    let kk = read_u32(r)? as usize;
                    let lnl = read_f64(r)?;
                    let bic = read_f64(r)?;
                    bic_table.push((kk, lnl, bic));
                }
                meta.insert(
                    k,
                    GmmMeta {
                        selected_k,
                        final_log_likelihood,
                        bic_table,
                    },
                );
            }
            Ok(ClassConditionalModel::Gmm { classes, meta })
        }
        other => Err(Error::Format(format!("bad density kind tag {other}"))),
    }
}

fn write_reduced_density<W: Write>(w: &mut W, d: &ReducedDensity) -> Result<()> {
    match d {
        ReducedDensity::Global(m) => {
            write_u8(w, 0)?;
            write_class_model(w, m)
        }
        ReducedDensity::PerClass(map) => {
            write_u8(w, 1)?;
            write_u32(w, map.len() as u32)?;
            for (k, m) in map {
                write_u32(w, *k as u32)?;
                write_mixture(w, m)?;
            }
            Ok(())
        }
    }
}

fn read_reduced_density<R: Read>(r: &mut R) -> Result<ReducedDensity> {
    match read_u8(r)? {
        0 => Ok(ReducedDensity::Global(read_class_model(r)?)),
        1 => {
            let n = read_u32(r)? as usize;
            let mut map = BTreeMap::new();
            for _ in 0..n {
                let k = read_u32(r)? as usize;
                map.insert(k, read_mixture(r)?);
            }
            Ok(ReducedDensity::PerClass(map))
        }
        other => Err(Error::Format(format!("bad reduced density tag {other}"))),
    }
}

// ---------------------------------------------------------------------------
// container
// ---------------------------------------------------------------------------

struct Section {
    kind: u8,
    layer_id: String,
    payload: Vec<u8>,
}

/// Serializes a fitted model. Sections are written in fixed kind order so
/// identical models produce identical bytes.
pub fn save_model(model: &FittedModel, path: impl AsRef<Path>) -> Result<()> {
    let mut sections: Vec<Section> = Vec::new();

    let mut meta_payload = Vec::new();
    write_u64(&mut meta_payload, model.seed)?;
    write_u32(&mut meta_payload, model.meta.len() as u32)?;
    for (k, v) in &model.meta {
        write_str(&mut meta_payload, k)?;
        write_str(&mut meta_payload, v)?;
    }
    sections.push(Section {
        kind: SECTION_META,
        layer_id: model.layer_id.clone(),
        payload: meta_payload,
    });

    if let Some(b) = &model.linear {
        let mut p = Vec::new();
        write_linear_bundle(&mut p, b)?;
        sections.push(Section {
            kind: SECTION_LINEAR,
            layer_id: model.layer_id.clone(),
            payload: p,
        });
    }
    if let Some(b) = &model.kernel {
        let mut p = Vec::new();
        write_kernel_bundle(&mut p, b)?;
        sections.push(Section {
            kind: SECTION_KERNEL,
            layer_id: model.layer_id.clone(),
            payload: p,
        });
    }
    if let Some(d) = &model.ll_density {
        let mut p = Vec::new();
        write_reduced_density(&mut p, d)?;
        sections.push(Section {
            kind: SECTION_LL_DENSITY,
            layer_id: model.layer_id.clone(),
            payload: p,
        });
    }
    if let Some(d) = &model.kll_density {
        let mut p = Vec::new();
        write_reduced_density(&mut p, d)?;
        sections.push(Section {
            kind: SECTION_KLL_DENSITY,
            layer_id: model.layer_id.clone(),
            payload: p,
        });
    }
    if let Some(m) = &model.mahal {
        let mut p = Vec::new();
        write_class_model(&mut p, m)?;
        sections.push(Section {
            kind: SECTION_MAHAL,
            layer_id: model.layer_id.clone(),
            payload: p,
        });
    }
    if let Some(text) = &model.manifest {
        let mut p = Vec::new();
        write_str(&mut p, text)?;
        sections.push(Section {
            kind: SECTION_MANIFEST,
            layer_id: model.layer_id.clone(),
            payload: p,
        });
    }

    // Table: kind u8, layer_id str, offset u64, len u64 per section.
    let mut table = Vec::new();
    let table_size: usize = sections
        .iter()
        .map(|s| 1 + 4 + s.layer_id.len() + 8 + 8)
        .sum();
    let mut offset = 4 + 4 + 4 + table_size as u64;
    for s in &sections {
        write_u8(&mut table, s.kind)?;
        write_str(&mut table, &s.layer_id)?;
        write_u64(&mut table, offset)?;
        write_u64(&mut table, s.payload.len() as u64)?;
        offset += s.payload.len() as u64;
    }

    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    write_u32(&mut out, MODEL_VERSION)?;
    write_u32(&mut out, sections.len() as u32)?;
    out.extend_from_slice(&table);
    for s in &sections {
        out.extend_from_slice(&s.payload);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor::new(&bytes[..]);
    expect_magic(&mut r, MODEL_MAGIC, "model container")?;
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model container version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = read_u8(&mut r)?;
        let layer_id = read_str(&mut r)?;
        let offset = read_u64(&mut r)? as usize;
        let len = read_u64(&mut r)? as usize;
        entries.push((kind, layer_id, offset, len));
    }
    // Offsets must be in order, non-overlapping, and inside the file.
    let mut cursor = r.position() as usize;
    for (kind, _, offset, len) in &entries {
        if *offset < cursor || offset + len > bytes.len() {
            return Err(Error::Format(format!(
                "section kind {kind} has invalid byte range {offset}+{len}"
            )));
        }
        cursor = offset + len;
    }

    let mut model = FittedModel {
        layer_id: String::new(),
        seed: 0,
        linear: None,
        kernel: None,
        ll_density: None,
        kll_density: None,
        mahal: None,
        meta: Vec::new(),
        manifest: None,
    };
    let mut seen_meta = false;
    for (kind, layer_id, offset, len) in entries {
        let mut sr = Cursor::new(&bytes[offset..offset + len]);
        match kind {
            SECTION_META => {
                model.layer_id = layer_id;
                model.seed = read_u64(&mut sr)?;
                let n = read_u32(&mut sr)? as usize;
                for _ in 0..n {
                    let k = read_str(&mut sr)?;
                    let v = read_str(&mut sr)?;
                    model.meta.push((k, v));
                }
                seen_meta = true;
            }
            SECTION_LINEAR => model.linear = Some(read_linear_bundle(&mut sr)?),
            SECTION_KERNEL => model.kernel = Some(read_kernel_bundle(&mut sr)?),
            SECTION_LL_DENSITY => model.ll_density = Some(read_reduced_density(&mut sr)?),
            SECTION_KLL_DENSITY => model.kll_density = Some(read_reduced_density(&mut sr)?),
            SECTION_MAHAL => model.mahal = Some(read_class_model(&mut sr)?),
            SECTION_MANIFEST => model.manifest = Some(read_str(&mut sr)?),
            other => return Err(Error::Format(format!("unknown section kind {other}"))),
        }
    }
    if !seen_meta {
        return Err(Error::Format("model container lacks a meta section".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_subspace::ReductionCriterion;
    use crate::pipeline::{fit, score, FitConfig};
    use crate::synthbench::{generate, OodMode, SynthSpec};

    fn fitted() -> (FittedModel, crate::feature_store::FeatureSet) {
        let spec = SynthSpec {
            ambient_dim: 20,
            intrinsic_dim: 3,
            classes: 2,
            train_per_class: 50,
            test_per_class: 20,
            ood_count: 20,
            mean_scale: 5.0,
            spectra: vec![vec![1.0; 3]; 2],
            ood_mode: OodMode::OffSubspace,
            ood_magnitude: 2.0,
            outlier_min_mahal: 4.0,
            noise_floor: 0.01,
            seed: 90,
        };
        let (train, test_in, _) = generate(&spec).unwrap();
        let cfg = FitConfig {
            seed: 4,
            pca_criterion: ReductionCriterion::FixedDim(3),
            ..Default::default()
        };
        (fit(&train, &cfg).unwrap(), test_in)
    }

    #[test]
    fn container_round_trip_preserves_model_and_scores() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.dfmm");
        let (model, test_in) = fitted();
        save_model(&model, &p).unwrap();
        let loaded = load_model(&p).unwrap();
        assert_eq!(model, loaded);

        let a = score(&model, &test_in, None).unwrap();
        let b = score(&loaded, &test_in, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn container_bytes_stable_under_rewrite() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.dfmm");
        let p2 = dir.path().join("m2.dfmm");
        let (model, _) = fitted();
        save_model(&model, &p1).unwrap();
        let loaded = load_model(&p1).unwrap();
        save_model(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn gmm_sections_round_trip() {
        let spec = SynthSpec {
            ambient_dim: 12,
            intrinsic_dim: 2,
            classes: 2,
            train_per_class: 60,
            test_per_class: 20,
            ood_count: 20,
            mean_scale: 4.0,
            spectra: vec![vec![1.0; 2]; 2],
            ood_mode: OodMode::OffSubspace,
            ood_magnitude: 2.0,
            outlier_min_mahal: 4.0,
            noise_floor: 0.01,
            seed: 91,
        };
        let (train, _, _) = generate(&spec).unwrap();
        let cfg = FitConfig {
            seed: 8,
            density_kind: crate::density::DensityKind::Gmm,
            gmm_k_max: 2,
            gmm_restarts: 2,
            pca_criterion: ReductionCriterion::FixedDim(2),
            scores: vec![crate::pipeline::ScoreFamily::Ll],
            ..Default::default()
        };
        let model = fit(&train, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gmm.dfmm");
        save_model(&model, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), model);
    }

    #[test]
    fn truncated_container_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.dfmm");
        let (model, _) = fitted();
        save_model(&model, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let cut = dir.path().join("cut.dfmm");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&cut).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.dfmm");
        std::fs::write(&p, b"NOPE0000").unwrap();
        match load_model(&p) {
            Err(Error::Format(_)) => {}
            other => panic!("expected Format error, got {other:?}"),
        }
    }
}
