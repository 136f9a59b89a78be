//! Classification metrics from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
    pub gm: f64,
    pub macro_recall: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricOptions {
    /// Support-weighted instead of macro precision.
    pub weighted_precision: bool,
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(CoreError::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(CoreError::Domain(format!("class index out of range: label {l}, prediction {p}")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    compute_metrics_with(predictions, labels, classes, MetricOptions::default())
}

pub fn compute_metrics_with(
    predictions: &[usize],
    labels: &[usize],
    classes: usize,
    opts: MetricOptions,
) -> Result<MetricsReport> {
    let m = confusion_matrix(predictions, labels, classes)?;
    metrics_from_confusion(&m, opts)
}

/// Geometric mean of recalls, `(Π r)^(1/n)`.
pub fn geometric_mean(recalls: &[f64]) -> f64 {
    if recalls.is_empty() {
        return 0.0;
    }
    if recalls.iter().any(|&r| r == 0.0) {
        return 0.0;
    }
    let n = recalls.len() as f64;
    let product: f64 = recalls.iter().product();
    if product.is_normal() {
        product.powf(1.0 / n)
    } else {
        (recalls.iter().map(|r| r.ln()).sum::<f64>() / n).exp()
    }
}

pub fn metrics_from_confusion(m: &[Vec<u64>], opts: MetricOptions) -> Result<MetricsReport> {
    let k = m.len();
    if m.iter().any(|row| row.len() != k) {
        return Err(CoreError::shape("confusion matrix must be square"));
    }
    let total: u64 = m.iter().flatten().sum();
    if total == 0 {
        return Err(CoreError::Data("no samples to score".into()));
    }
    let mut warnings = Vec::new();
    let support: Vec<u64> = m.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<u64> = (0..k).map(|c| m.iter().map(|r| r[c]).sum()).collect();
    let trace: u64 = (0..k).map(|c| m[c][c]).sum();

    let (mut precisions, mut f1s, mut recalls, mut weights) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in 0..k {
        if support[c] == 0 && predicted[c] == 0 {
            continue;
        }
        let tp = m[c][c] as f64;
        let p = if predicted[c] == 0 {
            warnings.push(format!("class {c} is never predicted; precision taken as 0"));
            0.0
        } else {
            tp / predicted[c] as f64
        };
        let r = if support[c] == 0 {
            warnings.push(format!("class {c} is absent from the labels; excluded from recall and GM"));
            None
        } else {
            Some(tp / support[c] as f64)
        };
        let rv = r.unwrap_or(0.0);
        let f1 = if p + rv == 0.0 { 0.0 } else { 2.0 * p * rv / (p + rv) };
        precisions.push(p);
        f1s.push(f1);
        weights.push(support[c] as f64);
        if let Some(r) = r {
            recalls.push(r);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let precision = if opts.weighted_precision {
        precisions.iter().zip(&weights).map(|(p, w)| p * w).sum::<f64>() / total as f64
    } else {
        mean(&precisions)
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(MetricsReport {
        accuracy: trace as f64 / total as f64,
        precision,
        f1: mean(&f1s),
        gm: geometric_mean(&recalls),
        macro_recall: mean(&recalls),
        confusion: m.to_vec(),
        total,
        warnings,
    })
}
