//! Feature ingestion, persistence, splitting, subsampling, and rank analysis.
//!
//! On-disk container is "DFM1": magic, u32 version, u64 rows, u64 cols,
//! u8 dtype (0 = f32, 1 = f64, 2 = i32), little-endian row-major payload.
//! Label files use the same header with cols = 1 and dtype = 2.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::codec;
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const FEATURE_MAGIC: &[u8; 4] = b"DFM1";
pub const FEATURE_VERSION: u32 = 1;

/// Element type of the on-disk payload. In memory everything is f64; the
/// tag is kept so a loaded set saves back bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::I32 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::I32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Labeled matrix of feature vectors from one network layer.
/// Rows are samples (M), columns are feature dimensions (D).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub layer_id: String,
    pub x: DMatrix<f64>,
    pub labels: Option<Vec<usize>>,
    pub class_count: Option<usize>,
    pub dtype: Dtype,
}

impl FeatureSet {
    pub fn unlabeled(layer_id: impl Into<String>, x: DMatrix<f64>) -> Result<Self> {
        Self::build(layer_id.into(), x, None, Dtype::F64)
    }

    pub fn labeled(
        layer_id: impl Into<String>,
        x: DMatrix<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        Self::build(layer_id.into(), x, Some(labels), Dtype::F64)
    }

    fn build(
        layer_id: String,
        x: DMatrix<f64>,
        labels: Option<Vec<usize>>,
        dtype: Dtype,
    ) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Format(format!(
                "empty feature matrix ({}x{})",
                x.nrows(),
                x.ncols()
            )));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite feature entry {bad}"
            )));
        }
        let class_count = match &labels {
            Some(ls) => {
                if ls.len() != x.nrows() {
                    return Err(Error::DimensionMismatch {
                        expected: x.nrows(),
                        actual: ls.len(),
                    });
                }
                Some(ls.iter().copied().max().unwrap_or(0) + 1)
            }
            None => None,
        };
        Ok(FeatureSet {
            layer_id,
            x,
            labels,
            class_count,
            dtype,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> nalgebra::DVector<f64> {
        self.x.row(i).transpose()
    }

    /// Content-derived sample id: first 16 hex chars of the SHA-256 of the
    /// row's little-endian f64 bytes. Identical rows share an id, which is
    /// what the train/holdout disjointness check keys on.
    pub fn row_id(&self, i: usize) -> String {
        let mut hasher = Sha256::new();
        for j in 0..self.x.ncols() {
            hasher.update(self.x[(i, j)].to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn row_ids(&self) -> Vec<String> {
        (0..self.num_samples()).map(|i| self.row_id(i)).collect()
    }
}

/// Splits a labeled set into per-class matrices. Row order within each
/// class preserves the original order.
pub fn split_per_class(fs: &FeatureSet) -> Result<Vec<(usize, DMatrix<f64>)>> {
    let labels = fs
        .labels
        .as_ref()
        .ok_or_else(|| Error::LabelsRequired("split_per_class".into()))?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in labels.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(k, rows)| {
            let mut m = DMatrix::zeros(rows.len(), fs.dim());
            for (r, &src) in rows.iter().enumerate() {
                m.row_mut(r).copy_from(&fs.x.row(src));
            }
            (k, m)
        })
        .collect())
}

/// Stratified subsample: per-class counts are round(fraction * M_k),
/// deterministic given the seed. Unlabeled sets are one stratum.
pub fn subsample(fs: &FeatureSet, fraction: f64, seed: u64) -> Result<FeatureSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subsample fraction {fraction} outside (0, 1]"
        )));
    }
    let strata: Vec<(String, Vec<usize>)> = match &fs.labels {
        Some(labels) => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &k) in labels.iter().enumerate() {
                groups.entry(k).or_default().push(i);
            }
            groups
                .into_iter()
                .map(|(k, idx)| (format!("class.{k}"), idx))
                .collect()
        }
        None => vec![("all".to_string(), (0..fs.num_samples()).collect())],
    };

    let mut selected = Vec::new();
    for (label, idx) in &strata {
        let m_k = idx.len() as f64;
        if fraction * m_k < 2.0 {
            return Err(Error::InsufficientSamples(format!(
                "subsample fraction {fraction} leaves fewer than 2 samples in stratum {label}"
            )));
        }
        let take = (fraction * m_k).round() as usize;
        let mut rng = rng_for(seed, &format!("subsample.{label}"));
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        selected.extend_from_slice(&shuffled[..take]);
    }
    selected.sort_unstable();

    let mut x = DMatrix::zeros(selected.len(), fs.dim());
    for (r, &src) in selected.iter().enumerate() {
        x.row_mut(r).copy_from(&fs.x.row(src));
    }
    let labels = fs
        .labels
        .as_ref()
        .map(|ls| selected.iter().map(|&i| ls[i]).collect::<Vec<_>>());
    let mut out = FeatureSet::build(fs.layer_id.clone(), x, labels, fs.dtype)?;
    out.class_count = fs.class_count;
    Ok(out)
}

/// Numerical rank and PCA dimensions at given variance-retention levels.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub dim: usize,
    pub rank: usize,
    /// (variance fraction, smallest component count reaching it), sorted
    /// by fraction. Counts are capped at the numerical rank.
    pub pca_dim_at: Vec<(f64, usize)>,
}

/// Counts singular values above `rel_tol * sigma_max` of the (by default
/// column-centered) matrix, and the component counts needed to retain each
/// requested variance fraction.
pub fn numerical_rank(x: &DMatrix<f64>, rel_tol: f64, levels: &[f64]) -> RankReport {
    numerical_rank_opts(x, rel_tol, levels, true)
}

pub fn numerical_rank_opts(
    x: &DMatrix<f64>,
    rel_tol: f64,
    levels: &[f64],
    center: bool,
) -> RankReport {
    let work = if center { center_columns(x) } else { x.clone() };
    let mut sigma: Vec<f64> = work.singular_values().iter().copied().collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let rank = if sigma_max <= 0.0 {
        0
    } else {
        sigma.iter().filter(|&&s| s > rel_tol * sigma_max).count()
    };

    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut levels_sorted: Vec<f64> = levels.to_vec();
    levels_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut pca_dim_at = Vec::with_capacity(levels_sorted.len());
    for &v in &levels_sorted {
        let mut cum = 0.0;
        let mut m = rank;
        for (i, s) in sigma.iter().take(rank).enumerate() {
            cum += s * s;
            if total > 0.0 && cum / total >= v {
                m = i + 1;
                break;
            }
        }
        pca_dim_at.push((v, m.min(rank)));
    }
    RankReport {
        dim: x.ncols(),
        rank,
        pca_dim_at,
    }
}

pub(crate) fn center_columns(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.nrows() as f64;
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let mean = x.column(j).sum() / m;
        for i in 0..x.nrows() {
            out[(i, j)] -= mean;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// DFM1 container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum FeatureFormat {
    Binary,
    Csv { label_col: Option<usize> },
}

pub fn save_features(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dfm1_header(&mut w, fs.num_samples(), fs.dim(), fs.dtype)?;
    for i in 0..fs.num_samples() {
        for j in 0..fs.dim() {
            match fs.dtype {
                Dtype::F32 => w.write_f32::<LittleEndian>(fs.x[(i, j)] as f32)?,
                Dtype::F64 => w.write_f64::<LittleEndian>(fs.x[(i, j)])?,
                Dtype::I32 => {
                    return Err(Error::Format("feature payload cannot be i32".into()))
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the label vector as a DFM1 file with cols = 1, dtype = i32.
pub fn save_labels(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let labels = fs
        .labels
        .as_ref()
        .ok_or_else(|| Error::LabelsRequired("save_labels".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    write_dfm1_header(&mut w, labels.len(), 1, Dtype::I32)?;
    for &l in labels {
        w.write_i32::<LittleEndian>(l as i32)?;
    }
    w.flush()?;
    Ok(())
}

fn write_dfm1_header<W: Write>(w: &mut W, rows: usize, cols: usize, dtype: Dtype) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    codec::write_u32(w, FEATURE_VERSION)?;
    codec::write_u64(w, rows as u64)?;
    codec::write_u64(w, cols as u64)?;
    codec::write_u8(w, dtype.code())?;
    Ok(())
}

fn read_dfm1_header<R: Read>(r: &mut R) -> Result<(usize, usize, Dtype)> {
    codec::expect_magic(r, FEATURE_MAGIC, "feature file")?;
    let version = codec::read_u32(r)?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature file version {version}"
        )));
    }
    let rows = codec::read_u64(r)? as usize;
    let cols = codec::read_u64(r)? as usize;
    let dtype = Dtype::from_code(codec::read_u8(r)?)?;
    Ok((rows, cols, dtype))
}

pub fn load_features(
    path: impl AsRef<Path>,
    format: FeatureFormat,
    labels_path: Option<&Path>,
) -> Result<FeatureSet> {
    let layer_id = path
        .as_ref()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "features".to_string());
    let (x, inline_labels, dtype) = match format {
        FeatureFormat::Binary => {
            let (x, dtype) = load_binary_matrix(path.as_ref())?;
            (x, None, dtype)
        }
        FeatureFormat::Csv { label_col } => {
            let (x, labels) = load_csv_matrix(path.as_ref(), label_col)?;
            (x, labels, Dtype::F64)
        }
    };
    let labels = match (inline_labels, labels_path) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "both an inline label column and a labels file were given".into(),
            ))
        }
        (Some(ls), None) => Some(ls),
        (None, Some(lp)) => Some(load_labels(lp)?),
        (None, None) => None,
    };
    FeatureSet::build(layer_id, x, labels, dtype)
}

fn load_binary_matrix(path: &Path) -> Result<(DMatrix<f64>, Dtype)> {
    let mut r = BufReader::new(File::open(path)?);
    let (rows, cols, dtype) = read_dfm1_header(&mut r)?;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("empty matrix ({rows}x{cols})")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    match dtype {
        Dtype::F32 => {
            for _ in 0..rows * cols {
                data.push(r.read_f32::<LittleEndian>()? as f64);
            }
        }
        Dtype::F64 => {
            for _ in 0..rows * cols {
                data.push(r.read_f64::<LittleEndian>()?);
            }
        }
        Dtype::I32 => {
            return Err(Error::Format(
                "feature payload has label dtype i32; load it as labels".into(),
            ))
        }
    }
    Ok((DMatrix::from_row_slice(rows, cols, &data), dtype))
}

/// Reads labels either from a DFM1 i32 file or from plain text with one
/// integer per line; the magic bytes decide.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = File::open(path)?;
    let mut head = [0u8; 4];
    let n = f.read(&mut head)?;
    if n == 4 && &head == FEATURE_MAGIC {
        let mut r = BufReader::new(File::open(path)?);
        let (rows, cols, dtype) = read_dfm1_header(&mut r)?;
        if cols != 1 || dtype != Dtype::I32 {
            return Err(Error::Format(format!(
                "label file must have cols=1 dtype=i32, got cols={cols}"
            )));
        }
        let mut out = Vec::with_capacity(rows);
        for _ in 0..rows {
            let v = r.read_i32::<LittleEndian>()?;
            if v < 0 {
                return Err(Error::InvalidValue(format!("negative label {v}")));
            }
            out.push(v as usize);
        }
        Ok(out)
    } else {
        let text = std::fs::read_to_string(path)?;
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let v: i64 = t
                .parse()
                .map_err(|e| Error::Format(format!("label line {}: {e}", lineno + 1)))?;
            if v < 0 {
                return Err(Error::InvalidValue(format!("negative label {v}")));
            }
            out.push(v as usize);
        }
        Ok(out)
    }
}

fn load_csv_matrix(
    path: &Path,
    label_col: Option<usize>,
) -> Result<(DMatrix<f64>, Option<Vec<usize>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("csv open: {e}")))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("csv record {}: {e}", i + 1)))?;
        let mut row = Vec::with_capacity(rec.len());
        let mut label = None;
        let mut parse_failed = false;
        for (j, field) in rec.iter().enumerate() {
            let t = field.trim();
            if Some(j) == label_col {
                match t.parse::<i64>() {
                    Ok(v) if v >= 0 => label = Some(v as usize),
                    Ok(v) => return Err(Error::InvalidValue(format!("negative label {v}"))),
                    Err(_) => parse_failed = true,
                }
            } else {
                match t.parse::<f64>() {
                    Ok(v) => row.push(v),
                    Err(_) => parse_failed = true,
                }
            }
            if parse_failed {
                break;
            }
        }
        if parse_failed {
            // Only the first row may fail to parse: treat it as a header.
            if i == 0 {
                continue;
            }
            return Err(Error::Format(format!("csv row {}: non-numeric cell", i + 1)));
        }
        if let Some(l) = label {
            labels.push(l);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("csv has no data rows".into()));
    }
    let cols = rows[0].len();
    if cols == 0 {
        return Err(Error::Format("csv rows have no feature columns".into()));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(Error::Format(format!(
            "csv row {} has {} columns, expected {cols}",
            bad + 1,
            rows[bad].len()
        )));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let x = DMatrix::from_row_slice(flat.len() / cols, cols, &flat);
    let labels = if label_col.is_some() { Some(labels) } else { None };
    Ok((x, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn binary_round_trip_identity() {
        let dir = tmpdir();
        let p = dir.path().join("f.dfm");
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let fs = FeatureSet::unlabeled("t", x).unwrap();
        save_features(&fs, &p).unwrap();
        let back = load_features(&p, FeatureFormat::Binary, None).unwrap();
        assert_eq!(back.num_samples(), 2);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.x, fs.x);
        assert_eq!(back.dtype, Dtype::F64);
    }

    #[test]
    fn binary_round_trip_single_value() {
        let dir = tmpdir();
        let p = dir.path().join("one.dfm");
        let fs = FeatureSet::unlabeled("t", DMatrix::from_row_slice(1, 1, &[0.5])).unwrap();
        save_features(&fs, &p).unwrap();
        let back = load_features(&p, FeatureFormat::Binary, None).unwrap();
        assert_eq!(back.x[(0, 0)].to_bits(), 0.5f64.to_bits());
    }

    #[test]
    fn f32_round_trip_preserves_dtype_and_bits() {
        let dir = tmpdir();
        let p = dir.path().join("f32.dfm");
        let mut fs =
            FeatureSet::unlabeled("t", DMatrix::from_row_slice(2, 2, &[0.1f32 as f64, 1.5, -2.25, 3.0]))
                .unwrap();
        fs.dtype = Dtype::F32;
        save_features(&fs, &p).unwrap();
        let back = load_features(&p, FeatureFormat::Binary, None).unwrap();
        assert_eq!(back.dtype, Dtype::F32);
        assert_eq!(back.x, fs.x);
        // And saving the loaded set again produces identical bytes.
        let p2 = dir.path().join("f32b.dfm");
        save_features(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn nan_rejected() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        match FeatureSet::unlabeled("t", x) {
            Err(Error::InvalidValue(_)) => {}
            other => panic!("expected InvalidValue, got {other:?}"),
        }
    }

    #[test]
    fn save_to_unwritable_path_is_io_error() {
        let fs = FeatureSet::unlabeled("t", DMatrix::from_row_slice(1, 1, &[0.5])).unwrap();
        match save_features(&fs, Path::new("/nonexistent-dir/f.dfm")) {
            Err(Error::Io(_)) => {}
            other => panic!("expected Io, got {other:?}"),
        }
    }

    #[test]
    fn csv_with_labels_file() {
        let dir = tmpdir();
        let p = dir.path().join("f.csv");
        let lp = dir.path().join("f.labels");
        std::fs::write(&p, "1.0,2.0\n3.0,4.0\n").unwrap();
        std::fs::write(&lp, "0\n1\n").unwrap();
        let fs = load_features(&p, FeatureFormat::Csv { label_col: None }, Some(&lp)).unwrap();
        assert_eq!(fs.num_samples(), 2);
        assert_eq!(fs.dim(), 2);
        assert_eq!(fs.class_count, Some(2));
        assert_eq!(fs.labels.as_ref().unwrap(), &vec![0, 1]);
    }

    #[test]
    fn csv_header_and_inline_label_column() {
        let dir = tmpdir();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "a,b,class\n1.0,2.0,0\n3.0,4.0,1\n").unwrap();
        let fs = load_features(&p, FeatureFormat::Csv { label_col: Some(2) }, None).unwrap();
        assert_eq!(fs.dim(), 2);
        assert_eq!(fs.labels.as_ref().unwrap(), &vec![0, 1]);
    }

    #[test]
    fn csv_nan_cell_rejected() {
        let dir = tmpdir();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "1.0,NaN\n").unwrap();
        match load_features(&p, FeatureFormat::Csv { label_col: None }, None) {
            Err(Error::InvalidValue(_)) => {}
            other => panic!("expected InvalidValue, got {other:?}"),
        }
    }

    #[test]
    fn split_per_class_partitions_in_order() {
        let x = DMatrix::from_row_slice(4, 1, &[10.0, 20.0, 30.0, 40.0]);
        let fs = FeatureSet::labeled("t", x, vec![0, 1, 0, 1]).unwrap();
        let groups = split_per_class(&fs).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].0, 0);
        assert_eq!(groups[0].1, DMatrix::from_row_slice(2, 1, &[10.0, 30.0]));
        assert_eq!(groups[1].1, DMatrix::from_row_slice(2, 1, &[20.0, 40.0]));
        let total: usize = groups.iter().map(|(_, m)| m.nrows()).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn split_single_class_is_whole_matrix() {
        let x = DMatrix::from_row_slice(3, 2, &[1., 2., 3., 4., 5., 6.]);
        let fs = FeatureSet::labeled("t", x.clone(), vec![0, 0, 0]).unwrap();
        let groups = split_per_class(&fs).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].1, x);
    }

    #[test]
    fn split_unlabeled_errors() {
        let fs = FeatureSet::unlabeled("t", DMatrix::zeros(2, 2).add_scalar(1.0)).unwrap();
        match split_per_class(&fs) {
            Err(Error::LabelsRequired(_)) => {}
            other => panic!("expected LabelsRequired, got {other:?}"),
        }
    }

    #[test]
    fn subsample_full_fraction_is_identity() {
        let x = DMatrix::from_fn(10, 3, |i, j| (i * 3 + j) as f64);
        let fs = FeatureSet::labeled("t", x, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]).unwrap();
        let sub = subsample(&fs, 1.0, 123).unwrap();
        assert_eq!(sub.x, fs.x);
        assert_eq!(sub.labels, fs.labels);
    }

    #[test]
    fn subsample_counts_and_determinism() {
        let mut labels = vec![0usize; 50];
        labels.extend(vec![1usize; 50]);
        let x = DMatrix::from_fn(100, 2, |i, j| (i * 2 + j) as f64);
        let fs = FeatureSet::labeled("t", x, labels).unwrap();
        let a = subsample(&fs, 0.2, 7).unwrap();
        let b = subsample(&fs, 0.2, 7).unwrap();
        assert_eq!(a, b);
        let counts = a.labels.as_ref().unwrap().iter().filter(|&&l| l == 0).count();
        assert_eq!(counts, 10);
        assert_eq!(a.num_samples(), 20);
        let c = subsample(&fs, 0.2, 8).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn subsample_too_small_fraction_errors() {
        let x = DMatrix::from_fn(10, 2, |i, j| (i + j) as f64);
        let fs = FeatureSet::labeled("t", x, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]).unwrap();
        match subsample(&fs, 0.1, 1) {
            Err(Error::InsufficientSamples(_)) => {}
            other => panic!("expected InsufficientSamples, got {other:?}"),
        }
    }

    #[test]
    fn rank_of_outer_product_is_one() {
        // Rows are multiples of one direction plus a constant row mean, so
        // the centered matrix is rank 1.
        let u = [1.0, 2.0, 3.0, 4.0];
        let v = [0.5, -1.0, 2.0];
        let x = DMatrix::from_fn(4, 3, |i, j| u[i] * v[j] + 1.0);
        let rep = numerical_rank(&x, 1e-6, &[0.5, 0.995]);
        assert_eq!(rep.rank, 1);
        assert_eq!(rep.pca_dim_at, vec![(0.5, 1), (0.995, 1)]);
    }

    #[test]
    fn rank_of_random_tall_matrix_is_full() {
        let mut rng = rng_for(99, "rank.full");
        let x = DMatrix::from_fn(100, 50, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let rep = numerical_rank(&x, 1e-6, &[]);
        assert_eq!(rep.rank, 50);
    }

    #[test]
    fn rank_invariant_to_row_permutation_and_duplicates() {
        let mut rng = rng_for(5, "rank.perm");
        let base = DMatrix::from_fn(20, 6, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let rep = numerical_rank(&base, 1e-6, &[0.9]);

        let mut rows: Vec<usize> = (0..20).collect();
        rows.shuffle(&mut rng);
        let mut permuted = DMatrix::zeros(20, 6);
        for (dst, &src) in rows.iter().enumerate() {
            permuted.row_mut(dst).copy_from(&base.row(src));
        }
        assert_eq!(numerical_rank(&permuted, 1e-6, &[0.9]).rank, rep.rank);

        let mut dup = DMatrix::zeros(25, 6);
        dup.rows_mut(0, 20).copy_from(&base);
        for i in 0..5 {
            dup.row_mut(20 + i).copy_from(&base.row(i));
        }
        assert_eq!(numerical_rank(&dup, 1e-6, &[0.9]).rank, rep.rank);
    }

    #[test]
    fn pca_dim_at_monotone_in_level() {
        let mut rng = rng_for(6, "rank.mono");
        let x = DMatrix::from_fn(40, 10, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let rep = numerical_rank(&x, 1e-6, &[0.2, 0.5, 0.8, 0.95, 0.999]);
        for w in rep.pca_dim_at.windows(2) {
            assert!(w[0].1 <= w[1].1, "pca_dim_at not monotone: {:?}", rep.pca_dim_at);
        }
        assert!(rep.pca_dim_at.iter().all(|&(_, m)| m <= rep.rank));
    }

    #[test]
    fn subsample_rank_never_exceeds_full_rank() {
        let mut rng = rng_for(7, "rank.sub");
        // Rank-3 data embedded in 8 dims.
        let basis = DMatrix::from_fn(3, 8, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let coef = DMatrix::from_fn(60, 3, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let x = &coef * &basis;
        let fs = FeatureSet::unlabeled("t", x.clone()).unwrap();
        let full = numerical_rank(&x, 1e-6, &[]).rank;
        for seed in 0..5 {
            let sub = subsample(&fs, 0.3, seed).unwrap();
            assert!(numerical_rank(&sub.x, 1e-6, &[]).rank <= full);
        }
    }

    #[test]
    fn row_ids_are_content_based() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0]);
        let fs = FeatureSet::unlabeled("t", x).unwrap();
        let ids = fs.row_ids();
        assert_eq!(ids[0], ids[2]);
        assert_ne!(ids[0], ids[1]);
        assert_eq!(ids[0].len(), 16);
    }

    #[test]
    fn labels_round_trip_binary() {
        let dir = tmpdir();
        let p = dir.path().join("l.dfm");
        let fs = FeatureSet::labeled(
            "t",
            DMatrix::from_row_slice(3, 1, &[1., 2., 3.]),
            vec![0, 2, 1],
        )
        .unwrap();
        save_labels(&fs, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), vec![0, 2, 1]);
    }
}
