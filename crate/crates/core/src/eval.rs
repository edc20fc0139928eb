//! Confusion-matrix metrics, exact ROC/AUC and report files.
//!
//! Positive-class precision/recall/F1 and their macro averages over both
//! classes are both reported. On a balanced test set the macro recall
//! equals accuracy.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels ({labels}) and predictions ({predictions}) differ in length")]
    Length { labels: usize, predictions: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("class value {0} is not 0 or 1")]
    Value(u8),
    #[error("AUC undefined: only one class present")]
    SingleClass,
    #[error("score {0} is not a finite number")]
    NonFinite(f64),
    #[error("no reports to emit")]
    NoReports,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_binary(values: &[u8]) -> Result<(), EvalError> {
    match values.iter().find(|&&v| v > 1) {
        Some(&v) => Err(EvalError::Value(v)),
        None => Ok(()),
    }
}

/// Counts with class 1 as positive.
pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<ConfusionMatrix, EvalError> {
    if labels.len() != predictions.len() {
        return Err(EvalError::Length {
            labels: labels.len(),
            predictions: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    check_binary(labels)?;
    check_binary(predictions)?;
    let mut cm = ConfusionMatrix::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            _ => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Positive class.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Unweighted means over the two classes.
    pub precision_macro: f64,
    pub recall_macro: f64,
    /// Mean of the per-class F1 scores.
    pub f1_macro: f64,
    /// Names of metrics whose denominator was zero (reported as 0).
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::Empty);
    }
    let mut flags = Vec::new();
    let ConfusionMatrix { tp, fp, tn, fn_ } = *cm;
    let accuracy = (tp + tn) as f64 / cm.total() as f64;
    let precision = ratio(tp, tp + fp, "precision", &mut flags);
    let recall = ratio(tp, tp + fn_, "recall", &mut flags);
    let specificity = ratio(tn, tn + fp, "specificity", &mut flags);
    let npv = ratio(tn, tn + fn_, "negative_predictive_value", &mut flags);
    let f1 = harmonic(precision, recall);
    let f1_negative = harmonic(npv, specificity);
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        sensitivity: recall,
        specificity,
        precision_macro: (precision + npv) / 2.0,
        recall_macro: (recall + specificity) / 2.0,
        f1_macro: (f1 + f1_negative) / 2.0,
        degenerate: flags,
    })
}

/// ROC over every distinct score as a threshold, from `(0, 0)` to `(1, 1)`,
/// and its trapezoidal area. Tied scores move diagonally, which counts a
/// tied positive/negative pair as one half.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<(f64, Vec<[f64; 2]>), EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::Length {
            labels: labels.len(),
            predictions: scores.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    check_binary(labels)?;
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(s));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut points = vec![[0.0, 0.0]];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of (1/neg)·(1/pos), kept integral.
    let mut area2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
        points.push([fp as f64 / neg as f64, tp as f64 / pos as f64]);
    }
    let auc = area2 as f64 / (2 * pos * neg) as f64;
    Ok((auc, points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub config_hash: String,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub auc: f64,
    pub roc: Vec<[f64; 2]>,
}

/// Scores are positive-class probabilities; `score >= threshold` predicts 1.
pub fn evaluate(
    model: &str,
    config_hash: &str,
    labels: &[u8],
    scores: &[f64],
    threshold: f64,
) -> Result<MetricsReport, EvalError> {
    let (auc, roc) = roc_auc(labels, scores)?;
    let predictions: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
    let confusion = confusion(labels, &predictions)?;
    Ok(MetricsReport {
        model: model.to_string(),
        config_hash: config_hash.to_string(),
        threshold,
        metrics: metrics(&confusion)?,
        confusion,
        auc,
        roc,
    })
}

pub const METRICS_HEADER: &str =
    "model,config_hash,accuracy,auc,f1_macro,precision_macro,recall_macro,f1,precision,recall,sensitivity,specificity";

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        let m = &r.metrics;
        let values = [
            m.accuracy,
            r.auc,
            m.f1_macro,
            m.precision_macro,
            m.recall_macro,
            m.f1,
            m.precision,
            m.recall,
            m.sensitivity,
            m.specificity,
        ];
        let cols: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "{},{},{}", r.model, r.config_hash, cols.join(","));
    }
    out
}

pub fn roc_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("model,config_hash,fpr,tpr\n");
    for r in reports {
        for [fpr, tpr] in &r.roc {
            let _ = writeln!(out, "{},{},{fpr:.4},{tpr:.4}", r.model, r.config_hash);
        }
    }
    out
}

#[derive(Serialize)]
struct ConfusionEntry<'a> {
    model: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    confusion: ConfusionMatrix,
}

#[derive(Serialize)]
struct RadarEntry<'a> {
    model: &'a str,
    config_hash: &'a str,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct Radar<'a> {
    axes: [&'static str; 7],
    models: Vec<RadarEntry<'a>>,
}

fn write_file(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Writes metrics.csv, roc.csv, confusion.json, radar.json and the
/// full-precision metrics.json into `dir`, in the order given.
pub fn emit_reports(reports: &[MetricsReport], dir: &Path) -> Result<(), EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(reports))?;
    write_file(&dir.join("roc.csv"), &roc_csv(reports))?;
    let confusion: Vec<ConfusionEntry> = reports
        .iter()
        .map(|r| ConfusionEntry {
            model: &r.model,
            config_hash: &r.config_hash,
            confusion: r.confusion,
        })
        .collect();
    write_file(&dir.join("confusion.json"), &pretty(&confusion))?;
    let radar = Radar {
        axes: ["accuracy", "auc", "f1_macro", "precision_macro", "recall_macro", "sensitivity", "specificity"],
        models: reports
            .iter()
            .map(|r| RadarEntry {
                model: &r.model,
                config_hash: &r.config_hash,
                values: vec![
                    r.metrics.accuracy,
                    r.auc,
                    r.metrics.f1_macro,
                    r.metrics.precision_macro,
                    r.metrics.recall_macro,
                    r.metrics.sensitivity,
                    r.metrics.specificity,
                ],
            })
            .collect(),
    };
    write_file(&dir.join("radar.json"), &pretty(&radar))?;
    write_file(&dir.join("metrics.json"), &pretty(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[1, 1, 1, 0, 0], &[1, 1, 1, 0, 0]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 3, fp: 0, tn: 2, fn_: 0 });
        let labels: Vec<u8> = (0..120).map(|i| u8::from(i < 60)).collect();
        let cm = confusion(&labels, &[1; 120]).unwrap();
        assert_eq!((cm.tp, cm.fp), (60, 60));
        assert!(matches!(confusion(&[1], &[]), Err(EvalError::Length { .. })));
        assert!(matches!(confusion(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn inversion_swaps_cells() {
        let labels = [1, 0, 1, 1, 0, 0, 1];
        let preds = [1, 1, 0, 1, 0, 1, 1];
        let inv = |v: &[u8]| v.iter().map(|x| 1 - x).collect::<Vec<u8>>();
        let a = confusion(&labels, &preds).unwrap();
        let b = confusion(&inv(&labels), &inv(&preds)).unwrap();
        assert_eq!((a.tp, a.fn_, a.tn, a.fp), (b.tn, b.fp, b.tp, b.fn_));
    }

    #[test]
    fn symmetric_counts() {
        let m = metrics(&ConfusionMatrix { tp: 25, fp: 25, tn: 25, fn_: 25 }).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (0.5, 0.5, 0.5));
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let m = metrics(&ConfusionMatrix { tp: 0, fp: 0, tn: 5, fn_: 0 }).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.contains(&"precision".to_string()));
        assert!(m.degenerate.contains(&"recall".to_string()));
        assert!(metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[1, 0, 1, 0], &[0.9, 0.8, 0.4, 0.2]).unwrap().0, 0.75);
        assert_eq!(roc_auc(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap().0, 1.0);
        assert_eq!(roc_auc(&[0, 1, 1, 0], &[0.5; 4]).unwrap().0, 0.5);
        assert!(matches!(roc_auc(&[1, 1], &[0.1, 0.2]), Err(EvalError::SingleClass)));
        assert!(matches!(roc_auc(&[1, 0], &[f64::NAN, 0.2]), Err(EvalError::NonFinite(_))));
    }

    #[test]
    fn roc_is_anchored() {
        let (_, pts) = roc_auc(&[1, 0, 1, 0, 1], &[0.3, 0.3, 0.9, 0.1, 0.5]).unwrap();
        assert_eq!(pts[0], [0.0, 0.0]);
        assert_eq!(*pts.last().unwrap(), [1.0, 1.0]);
        assert!(pts.windows(2).all(|w| w[1][0] >= w[0][0] && w[1][1] >= w[0][1]));
    }
}
