//! Classification and evasion metrics, cross-seed aggregation, and report
//! emission.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::nn::Tensor2;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("prediction/truth length mismatch: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("no malware samples to evaluate")]
    NoMalware,
    #[error("invalid evasion counts: target {m_target} <= evaded {m_evaded} <= malware {m_malware} violated")]
    BadCounts {
        m_malware: usize,
        m_evaded: usize,
        m_target: usize,
    },
    #[error("no records for aggregation cell {0}")]
    EmptyCell(String),
}

/// Raw attack outcome counts over one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EvasionCounts {
    /// Malware samples attacked.
    pub m_malware: usize,
    /// No longer classified as malware.
    pub m_evaded: usize,
    /// Classified as the intended target class.
    pub m_target: usize,
}

impl EvasionCounts {
    pub fn new(m_malware: usize, m_evaded: usize, m_target: usize) -> Result<Self, EvalError> {
        if m_target > m_evaded || m_evaded > m_malware {
            return Err(EvalError::BadCounts {
                m_malware,
                m_evaded,
                m_target,
            });
        }
        Ok(EvasionCounts {
            m_malware,
            m_evaded,
            m_target,
        })
    }
}

/// Untargeted evasion rate, targeted success rate, and conditional target
/// success (TSR/UER; `None` when nothing evaded).
pub fn evasion_metrics(counts: EvasionCounts) -> Result<(f64, f64, Option<f64>), EvalError> {
    if counts.m_malware == 0 {
        return Err(EvalError::NoMalware);
    }
    let uer = counts.m_evaded as f64 / counts.m_malware as f64;
    let tsr = counts.m_target as f64 / counts.m_malware as f64;
    let cts = (counts.m_evaded > 0).then(|| tsr / uer);
    Ok((uer, tsr, cts))
}

/// One attack evaluation: method x k x seed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub k: usize,
    pub seed: u64,
    pub uer: f64,
    pub tsr: f64,
    pub cts: Option<f64>,
    pub recall6: f64,
}

impl MetricRecord {
    pub fn from_counts(
        method: &str,
        k: usize,
        seed: u64,
        counts: EvasionCounts,
    ) -> Result<Self, EvalError> {
        let (uer, tsr, cts) = evasion_metrics(counts)?;
        Ok(MetricRecord {
            method: method.to_string(),
            k,
            seed,
            uer,
            tsr,
            cts,
            recall6: 1.0 - uer,
        })
    }
}

/// Standard multiclass metrics with macro (unweighted class-mean)
/// variants. Classes absent from the truth set are excluded from macros
/// and flagged; classes never predicted score F1 = 0 by convention.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_recall: f64,
    /// Per 0-based class; `None` when the class is absent from truth.
    pub per_class_recall: Vec<Option<f64>>,
    pub has_absent_classes: bool,
}

pub fn classification_metrics(
    pred: &[usize],
    truth: &[usize],
    class_count: usize,
) -> Result<ClassificationMetrics, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let n = truth.len();
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fn_ = vec![0usize; class_count];
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            correct += 1;
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }

    let mut per_class_recall = Vec::with_capacity(class_count);
    let mut f1_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for c in 0..class_count {
        let support = tp[c] + fn_[c];
        if support == 0 {
            per_class_recall.push(None);
            continue;
        }
        present += 1;
        let recall = tp[c] as f64 / support as f64;
        per_class_recall.push(Some(recall));
        recall_sum += recall;
        let predicted = tp[c] + fp[c];
        let f1 = if predicted == 0 || tp[c] == 0 {
            0.0
        } else {
            let precision = tp[c] as f64 / predicted as f64;
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;
    }

    Ok(ClassificationMetrics {
        accuracy: correct as f64 / n.max(1) as f64,
        macro_f1: f1_sum / present.max(1) as f64,
        macro_recall: recall_sum / present.max(1) as f64,
        per_class_recall,
        has_absent_classes: present < class_count,
    })
}

/// Mean and n-1 standard deviation; std is 0 for a single value.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Quartile by linear interpolation between closest ranks.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Cross-seed summary for one (method, k) cell.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AggregateCell {
    pub method: String,
    pub k: usize,
    pub n_seeds: usize,
    pub uer_mean: f64,
    pub uer_std: f64,
    pub uer_q1: f64,
    pub uer_q3: f64,
    pub tsr_mean: f64,
    pub tsr_std: f64,
    /// Over seeds where CTS was defined; `None` if it never was.
    pub cts_mean: Option<f64>,
    pub cts_std: Option<f64>,
    /// How many seeds had a defined CTS.
    pub cts_defined: usize,
    pub recall6_mean: f64,
}

/// Group records by (method, k) and summarize. Cells come back sorted by
/// method name, then k.
pub fn aggregate_runs(records: &[MetricRecord]) -> Result<Vec<AggregateCell>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyCell("no records at all".into()));
    }
    let mut cells: BTreeMap<(String, usize), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.method.clone(), r.k)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(cells.len());
    for ((method, k), rs) in cells {
        let uers: Vec<f64> = rs.iter().map(|r| r.uer).collect();
        let tsrs: Vec<f64> = rs.iter().map(|r| r.tsr).collect();
        let recalls: Vec<f64> = rs.iter().map(|r| r.recall6).collect();
        let ctss: Vec<f64> = rs.iter().filter_map(|r| r.cts).collect();
        let (uer_mean, uer_std) = mean_std(&uers);
        let (tsr_mean, tsr_std) = mean_std(&tsrs);
        let (recall6_mean, _) = mean_std(&recalls);
        let mut sorted_uer = uers.clone();
        sorted_uer.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let (cts_mean, cts_std) = if ctss.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&ctss);
            (Some(m), Some(s))
        };
        out.push(AggregateCell {
            method,
            k,
            n_seeds: rs.len(),
            uer_mean,
            uer_std,
            uer_q1: quantile(&sorted_uer, 0.25),
            uer_q3: quantile(&sorted_uer, 0.75),
            tsr_mean,
            tsr_std,
            cts_mean,
            cts_std,
            cts_defined: ctss.len(),
            recall6_mean,
        });
    }
    Ok(out)
}

/// Nearest-centroid prediction: per class mean of training rows, then
/// Euclidean argmin per evaluation row (ties to lowest class).
pub fn nearest_centroid_predict(
    train_x: &Tensor2,
    train_y: &[usize],
    eval_x: &Tensor2,
    class_count: usize,
) -> Vec<usize> {
    let d = train_x.cols();
    let mut centroids = vec![vec![0.0f64; d]; class_count];
    let mut counts = vec![0usize; class_count];
    for (i, &c) in train_y.iter().enumerate() {
        counts[c] += 1;
        for (acc, &v) in centroids[c].iter_mut().zip(train_x.row(i)) {
            *acc += v;
        }
    }
    for (c, centroid) in centroids.iter_mut().enumerate() {
        if counts[c] > 0 {
            for v in centroid.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
    }
    (0..eval_x.rows())
        .map(|i| {
            let row = eval_x.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                if counts[c] == 0 {
                    continue;
                }
                let dist: f64 = row
                    .iter()
                    .zip(centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// One row per record.
pub fn write_records_csv(records: &[MetricRecord], path: &Path) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "method,k,seed,uer,tsr,cts,recall6")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{},{:.6}",
            r.method,
            r.k,
            r.seed,
            r.uer,
            r.tsr,
            r.cts.map_or("null".to_string(), |v| format!("{v:.6}")),
            r.recall6
        )?;
    }
    Ok(())
}

/// One row per (method, k) with mean/std and CTS definedness count.
pub fn write_aggregate_csv(cells: &[AggregateCell], path: &Path) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "method,k,n_seeds,uer_mean,uer_std,tsr_mean,tsr_std,cts_mean,cts_std,cts_defined,recall6_mean"
    )?;
    for c in cells {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{:.6}",
            c.method,
            c.k,
            c.n_seeds,
            c.uer_mean,
            c.uer_std,
            c.tsr_mean,
            c.tsr_std,
            c.cts_mean.map_or("null".to_string(), |v| format!("{v:.6}")),
            c.cts_std.map_or("null".to_string(), |v| format!("{v:.6}")),
            c.cts_defined,
            c.recall6_mean
        )?;
    }
    Ok(())
}

/// k vs UER per method with interquartile bands (plot-ready long format).
pub fn write_plot_csv(cells: &[AggregateCell], path: &Path) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "method,k,uer_mean,uer_q1,uer_q3")?;
    for c in cells {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6}",
            c.method, c.k, c.uer_mean, c.uer_q1, c.uer_q3
        )?;
    }
    Ok(())
}
