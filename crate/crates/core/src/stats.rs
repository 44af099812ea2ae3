//! Pearson and Spearman correlation between internal metrics and external
//! scores, including the keyed CSV join used for correlation tables.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{GeoError, Result};
use crate::report::csv_float;

/// A named metric column: `(row key, value)` pairs with unique keys.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub label: String,
    pub values: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationResult {
    pub metric_a: String,
    pub metric_b: String,
    pub pearson: f64,
    pub spearman: f64,
    pub spearman_p: f64,
    pub n: usize,
    /// Joined rows discarded because one side was missing.
    pub dropped: usize,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(GeoError::shape(
            "correlation inputs",
            format!("{} values", x.len()),
            format!("{} values", y.len()),
        ));
    }
    if x.len() < 3 {
        return Err(GeoError::InsufficientData(format!(
            "correlation needs at least 3 pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(GeoError::InvalidConfig("correlation inputs must be finite".into()));
    }
    Ok(())
}

fn product_moment(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GeoError::DegenerateInput(format!("zero {what} variance")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    product_moment(x, y, "")
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let mean = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    ranks
}

/// Two-sided p-value of a correlation coefficient under the t approximation
/// with `n - 2` degrees of freedom.
pub fn correlation_p_value(rho: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    let denom = 1.0 - rho * rho;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = rho.abs() * (df / denom).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t)).min(1.0)
}

/// Spearman rank correlation and its two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_pair(x, y)?;
    let rho = product_moment(&average_ranks(x), &average_ranks(y), "rank")?;
    Ok((rho, correlation_p_value(rho, x.len())))
}

/// Metric columns of a CSV keyed by one string column.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub key_column: String,
    pub columns: Vec<MetricSeries>,
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim().to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "null" | "none"
    )
}

/// Parse a CSV with a header row. Every non-key column is a metric; empty,
/// `NA` and `NaN` cells count as missing.
pub fn read_metric_table<R: std::io::Read>(reader: R, key: &str, source: &str) -> Result<MetricTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let bad = |reason: String| GeoError::InvalidConfig(format!("{source}: {reason}"));
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let key_idx = headers
        .iter()
        .position(|h| h == key)
        .ok_or_else(|| bad(format!("no join key column '{key}'")))?;
    let mut columns: Vec<MetricSeries> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != key_idx)
        .map(|(_, h)| MetricSeries {
            label: h.to_owned(),
            values: Vec::new(),
        })
        .collect();
    let mut seen = HashSet::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let row_key = record.get(key_idx).unwrap_or("").to_owned();
        if !seen.insert(row_key.clone()) {
            return Err(bad(format!("duplicate key '{row_key}'")));
        }
        let mut col = 0;
        for (i, cell) in record.iter().enumerate() {
            if i == key_idx {
                continue;
            }
            if !is_missing(cell) {
                let value: f64 = cell.parse().map_err(|_| {
                    bad(format!("row {}: '{cell}' in column {} is not a number", line + 2, columns[col].label))
                })?;
                if value.is_finite() {
                    columns[col].values.push((row_key.clone(), value));
                }
            }
            col += 1;
        }
    }
    Ok(MetricTable {
        key_column: key.to_owned(),
        columns,
    })
}

pub fn read_metric_csv(path: &Path, key: &str) -> Result<MetricTable> {
    let file = std::fs::File::open(path).map_err(|e| GeoError::io(path, e))?;
    read_metric_table(file, key, &path.display().to_string())
}

/// Correlate two columns over keys present in both, dropping rows where either
/// value is missing. `joined` is the number of keys the two tables share.
pub fn correlate_series(a: &MetricSeries, b: &MetricSeries, joined: usize) -> Result<CorrelationResult> {
    let lookup: HashMap<&str, f64> = b.values.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = a
        .values
        .iter()
        .filter_map(|(k, v)| lookup.get(k.as_str()).map(|w| (*v, *w)))
        .unzip();
    if x.len() < 3 {
        return Err(GeoError::InsufficientData(format!(
            "{} vs {}: only {} joined rows with both values",
            a.label,
            b.label,
            x.len()
        )));
    }
    let p = pearson(&x, &y)?;
    let (rho, pval) = spearman(&x, &y)?;
    Ok(CorrelationResult {
        metric_a: a.label.clone(),
        metric_b: b.label.clone(),
        pearson: p,
        spearman: rho,
        spearman_p: pval,
        n: x.len(),
        dropped: joined.saturating_sub(x.len()),
    })
}

/// One result per (internal column, external column) pair, in header order.
pub fn correlate_tables(internal: &MetricTable, external: &MetricTable) -> Result<Vec<CorrelationResult>> {
    let keys = |t: &MetricTable| -> HashSet<String> {
        t.columns
            .iter()
            .flat_map(|c| c.values.iter().map(|(k, _)| k.clone()))
            .collect()
    };
    let joined = keys(internal).intersection(&keys(external)).count();
    if joined < 3 {
        return Err(GeoError::InsufficientData(format!(
            "join on '{}' produced {joined} rows (need at least 3)",
            internal.key_column
        )));
    }
    let mut out = Vec::new();
    for a in &internal.columns {
        for b in &external.columns {
            out.push(correlate_series(a, b, joined)?);
        }
    }
    Ok(out)
}

pub fn correlate_table(internal: &Path, external: &Path, key: &str) -> Result<Vec<CorrelationResult>> {
    let a = read_metric_csv(internal, key)?;
    let b = read_metric_csv(external, key)?;
    correlate_tables(&a, &b)
}

/// CSV with columns `metric, external_metric, pearson, spearman, spearman_p, n`.
pub fn correlations_to_csv(results: &[CorrelationResult]) -> String {
    let mut out = String::from("metric,external_metric,pearson,spearman,spearman_p,n\n");
    for r in results {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record([
            r.metric_a.as_str(),
            r.metric_b.as_str(),
            &csv_float(r.pearson),
            &csv_float(r.spearman),
            &csv_float(r.spearman_p),
            &r.n.to_string(),
        ])
        .expect("writing to memory");
        out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf8"));
    }
    out
}
