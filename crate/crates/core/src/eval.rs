//! Detection metrics over per-sample confidence scores: ROC/PR curves,
//! AUROC (Mann-Whitney with half-credit ties), AUPR (average precision with
//! the in-distribution samples as positives), score histograms, and a
//! cross-column logistic combiner.
//!
//! Every score column shares one orientation: higher means more
//! in-distribution. Reconstruction-error columns are negated before they
//! enter a table.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Named score columns plus the in-distribution membership flag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    sample_ids: Vec<String>,
    membership: Vec<bool>,
    columns: Vec<(String, Vec<f64>)>,
}

impl ScoreTable {
    pub fn new(sample_ids: Vec<String>, membership: Vec<bool>) -> Result<Self> {
        if sample_ids.len() != membership.len() {
            return Err(Error::DimensionMismatch {
                expected: sample_ids.len(),
                actual: membership.len(),
            });
        }
        Ok(ScoreTable {
            sample_ids,
            membership,
            columns: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn membership(&self) -> &[bool] {
        &self.membership
    }

    pub fn add_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: values.len(),
            });
        }
        if self.columns.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate score column '{name}'")));
        }
        self.columns.push((name, values));
        Ok(())
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Splits one column into (in-distribution, out-of-distribution) scores.
    pub fn split(&self, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let col = self.column(name)?;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (v, &m) in col.iter().zip(&self.membership) {
            if m {
                pos.push(*v);
            } else {
                neg.push(*v);
            }
        }
        Ok((pos, neg))
    }

    /// Appends another table's rows; the column sets must match.
    pub fn concat(&self, other: &ScoreTable) -> Result<ScoreTable> {
        if self.column_names() != other.column_names() {
            return Err(Error::Config(format!(
                "score tables have different columns: {:?} vs {:?}",
                self.column_names(),
                other.column_names()
            )));
        }
        let mut ids = self.sample_ids.clone();
        ids.extend(other.sample_ids.iter().cloned());
        let mut membership = self.membership.clone();
        membership.extend(other.membership.iter().copied());
        let mut out = ScoreTable::new(ids, membership)?;
        for (name, values) in &self.columns {
            let mut v = values.clone();
            v.extend(other.column(name)?.iter().copied());
            out.add_column(name.clone(), v)?;
        }
        Ok(out)
    }

    /// Same table with every membership flag replaced.
    pub fn with_membership(&self, value: bool) -> ScoreTable {
        let mut t = self.clone();
        for m in t.membership.iter_mut() {
            *m = value;
        }
        t
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = String::from("sample_id,membership");
        for (name, _) in &self.columns {
            write!(s, ",{name}").unwrap();
        }
        s.push('\n');
        for i in 0..self.len() {
            write!(s, "{},{}", self.sample_ids[i], u8::from(self.membership[i])).unwrap();
            for (_, values) in &self.columns {
                write!(s, ",{}", values[i]).unwrap();
            }
            s.push('\n');
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<ScoreTable> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path.as_ref())
            .map_err(|e| Error::Format(format!("score csv open: {e}")))?;
        let headers = rdr
            .headers()
            .map_err(|e| Error::Format(format!("score csv header: {e}")))?
            .clone();
        if headers.len() < 2 || &headers[0] != "sample_id" || &headers[1] != "membership" {
            return Err(Error::Format(
                "score csv must start with sample_id,membership columns".into(),
            ));
        }
        let names: Vec<String> = headers.iter().skip(2).map(|s| s.to_string()).collect();
        let mut ids = Vec::new();
        let mut membership = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("score csv row {}: {e}", i + 1)))?;
            if rec.len() != names.len() + 2 {
                return Err(Error::Format(format!(
                    "score csv row {} has {} fields, expected {}",
                    i + 1,
                    rec.len(),
                    names.len() + 2
                )));
            }
            ids.push(rec[0].to_string());
            membership.push(match &rec[1] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Format(format!(
                        "score csv row {}: membership '{other}' not 0/1",
                        i + 1
                    )))
                }
            });
            for (j, cell) in rec.iter().skip(2).enumerate() {
                let v: f64 = cell.parse().map_err(|e| {
                    Error::Format(format!("score csv row {} col {}: {e}", i + 1, j + 3))
                })?;
                cols[j].push(v);
            }
        }
        let mut table = ScoreTable::new(ids, membership)?;
        for (name, values) in names.into_iter().zip(cols) {
            table.add_column(name, values)?;
        }
        Ok(table)
    }
}

fn check_nonempty_finite(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InsufficientSamples(
            "metric needs both in-distribution and OOD scores".into(),
        ));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::InvalidValue("NaN score".into()));
    }
    Ok(())
}

/// P(pos > neg) + 0.5 P(pos == neg): rank-sum with average ranks for ties,
/// identical to the trapezoidal area under the ROC curve.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_nonempty_finite(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged over the tie group.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Average precision over descending-score thresholds, in-distribution as
/// the positive class: sum_n (R_n - R_{n-1}) P_n.
pub fn aupr(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_nonempty_finite(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let np = pos.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let recall = tp / np;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// ROC points (threshold, fpr, tpr) for descending thresholds, prefixed by
/// the all-negative point.
pub fn roc_curve(pos: &[f64], neg: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    check_nonempty_finite(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    let mut points = vec![(f64::INFINITY, 0.0, 0.0)];
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        points.push((all[i].0, fp / nn, tp / np));
        i = j;
    }
    Ok(points)
}

/// PR points (recall, precision) for descending thresholds.
pub fn pr_curve(pos: &[f64], neg: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_nonempty_finite(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let np = pos.len() as f64;
    let mut points = Vec::new();
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        points.push((tp / np, tp / (tp + fp)));
        i = j;
    }
    Ok(points)
}

/// Metrics plus the curves they were read off.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub auroc: f64,
    pub aupr: f64,
    pub roc: Vec<(f64, f64, f64)>,
    pub pr: Vec<(f64, f64)>,
}

pub fn evaluate(pos: &[f64], neg: &[f64]) -> Result<EvalResult> {
    Ok(EvalResult {
        auroc: auroc(pos, neg)?,
        aupr: aupr(pos, neg)?,
        roc: roc_curve(pos, neg)?,
        pr: pr_curve(pos, neg)?,
    })
}

/// Equal-width histogram of one score column, split by membership.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub column: String,
    /// bins + 1 edges spanning the pooled min/max.
    pub edges: Vec<f64>,
    pub count_in: Vec<usize>,
    pub count_out: Vec<usize>,
    pub warning: Option<String>,
}

pub fn export_histograms(table: &ScoreTable, column: &str, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least 1 bin".into()));
    }
    let (pos, neg) = table.split(column)?;
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    if all.is_empty() {
        return Err(Error::InsufficientSamples("histogram of empty table".into()));
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| lo + span * i as f64 / bins as f64)
        .collect();
    let bin_of = |v: f64| -> usize {
        if span <= 0.0 {
            return 0;
        }
        let idx = ((v - lo) / span * bins as f64).floor() as usize;
        idx.min(bins - 1)
    };
    let mut count_in = vec![0usize; bins];
    let mut count_out = vec![0usize; bins];
    for v in &pos {
        count_in[bin_of(*v)] += 1;
    }
    for v in &neg {
        count_out[bin_of(*v)] += 1;
    }
    let warning = if neg.is_empty() {
        Some("no OOD samples in table".to_string())
    } else if pos.is_empty() {
        Some("no in-distribution samples in table".to_string())
    } else {
        None
    };
    Ok(Histogram {
        column: column.to_string(),
        edges,
        count_in,
        count_out,
        warning,
    })
}

/// L2-regularized logistic regression over standardized score columns,
/// fitted by gradient ascent. Combines per-layer/per-family scores into one.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticCombiner {
    pub column_names: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub converged: bool,
}

impl LogisticCombiner {
    /// Combined score: the logit of the fitted in-distribution probability.
    pub fn score(&self, table: &ScoreTable) -> Result<Vec<f64>> {
        let cols: Vec<&[f64]> = self
            .column_names
            .iter()
            .map(|n| table.column(n))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(table.len());
        for i in 0..table.len() {
            let mut v = self.intercept;
            for (j, col) in cols.iter().enumerate() {
                v += self.weights[j] * (col[i] - self.means[j]) / self.stds[j];
            }
            out.push(v);
        }
        Ok(out)
    }
}

const COMBINER_MAX_ITER: usize = 10_000;
const COMBINER_L2: f64 = 1e-3;

pub fn fit_logistic_combiner(table: &ScoreTable) -> Result<LogisticCombiner> {
    let names: Vec<String> = table.column_names().iter().map(|s| s.to_string()).collect();
    if names.len() < 2 {
        return Err(Error::Config(
            "combiner needs at least 2 score columns".into(),
        ));
    }
    let n = table.len();
    let pos_count = table.membership().iter().filter(|&&m| m).count();
    if pos_count == 0 || pos_count == n {
        return Err(Error::InsufficientSamples(
            "combiner needs both classes in the held-out table".into(),
        ));
    }

    let k = names.len();
    let mut means = vec![0.0; k];
    let mut stds = vec![0.0; k];
    let mut x = DMatrix::zeros(n, k);
    for (j, name) in names.iter().enumerate() {
        let col = table.column(name)?;
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        means[j] = mean;
        stds[j] = std;
        for i in 0..n {
            x[(i, j)] = (col[i] - mean) / std;
        }
    }
    let y: Vec<f64> = table.membership().iter().map(|&m| f64::from(m)).collect();

    // Maximize mean log-likelihood - l2 * |w|^2 by gradient ascent with
    // halving step control.
    let mut w = DVector::zeros(k);
    let mut b = 0.0f64;
    let objective = |w: &DVector<f64>, b: f64| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            let logit: f64 = b + x.row(i).transpose().dot(w);
            // log sigma(logit) for y=1, log(1 - sigma) for y=0
            let log_p = -(1.0 + (-logit).exp()).ln();
            let log_q = -(1.0 + logit.exp()).ln();
            ll += y[i] * log_p + (1.0 - y[i]) * log_q;
        }
        ll / n as f64 - COMBINER_L2 * w.norm_squared()
    };

    let mut obj = objective(&w, b);
    let mut lr = 1.0;
    let mut converged = false;
    for _ in 0..COMBINER_MAX_ITER {
        let mut grad_w = DVector::zeros(k);
        let mut grad_b = 0.0;
        for i in 0..n {
            let logit: f64 = b + x.row(i).transpose().dot(&w);
            let p = 1.0 / (1.0 + (-logit).exp());
            let r = y[i] - p;
            grad_w += x.row(i).transpose() * r;
            grad_b += r;
        }
        grad_w /= n as f64;
        grad_b /= n as f64;
        grad_w -= &w * (2.0 * COMBINER_L2);

        if grad_w.amax().max(grad_b.abs()) < 1e-9 {
            converged = true;
            break;
        }
        // Backtracking: shrink until the step improves the objective.
        let mut stepped = false;
        while lr > 1e-12 {
            let w_new = &w + &grad_w * lr;
            let b_new = b + grad_b * lr;
            let obj_new = objective(&w_new, b_new);
            if obj_new > obj {
                w = w_new;
                b = b_new;
                obj = obj_new;
                stepped = true;
                lr *= 1.5;
                break;
            }
            lr *= 0.5;
        }
        if !stepped {
            converged = true; // no ascent direction left at fp resolution
            break;
        }
    }

    Ok(LogisticCombiner {
        column_names: names,
        weights: w.iter().copied().collect(),
        intercept: b,
        means,
        stds,
        converged,
    })
}

/// Writes `{column}.auroc=` / `{column}.aupr=` lines for every column.
pub fn write_metrics_file(
    path: impl AsRef<Path>,
    metrics: &[(String, EvalResult)],
) -> Result<()> {
    let mut s = String::new();
    for (name, r) in metrics {
        writeln!(s, "{name}.auroc={}", r.auroc).unwrap();
        writeln!(s, "{name}.aupr={}", r.aupr).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_roc_csv(path: impl AsRef<Path>, roc: &[(f64, f64, f64)]) -> Result<()> {
    let mut s = String::from("threshold,fpr,tpr\n");
    for (t, fpr, tpr) in roc {
        writeln!(s, "{t},{fpr},{tpr}").unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_pr_csv(path: impl AsRef<Path>, pr: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from("recall,precision\n");
    for (r, p) in pr {
        writeln!(s, "{r},{p}").unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_hist_csv(path: impl AsRef<Path>, hist: &Histogram) -> Result<()> {
    let mut s = String::from("bin_left,count_in,count_out\n");
    for i in 0..hist.count_in.len() {
        writeln!(s, "{},{},{}", hist.edges[i], hist.count_in[i], hist.count_out[i]).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}
