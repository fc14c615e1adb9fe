//! Classification metrics, confusion matrices, k-fold aggregation and the
//! binary class-pair relabelling used by the pairwise ablation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};

/// `counts[t][p]` = number of samples with true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Rows scaled to sum to one (all-zero rows stay zero).
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }

    /// CSV with a `true\predicted` header row and one row per true class.
    pub fn write_csv(&self, path: &Path, normalized: bool) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.class_names.iter().cloned());
        let csv_err = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
        w.write_record(&header).map_err(csv_err)?;
        let norm = self.row_normalized();
        for (i, name) in self.class_names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            if normalized {
                rec.extend(norm[i].iter().map(|v| format!("{v:.6}")));
            } else {
                rec.extend(self.counts[i].iter().map(u64::to_string));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn class_names() -> Vec<String> {
    ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect()
}

/// Confusion matrix over `names.len()` classes given class indices.
pub fn confusion(preds: &[usize], labels: &[usize], names: &[String]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Validation(format!(
            "need equally many non-zero predictions and labels, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let k = names.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::Validation(format!("class index out of range 0..{k}: pred {p}, label {t}")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: names.to_vec(),
    })
}

pub fn confusion_labels(preds: &[ClassLabel], labels: &[ClassLabel]) -> Result<ConfusionMatrix> {
    let p: Vec<usize> = preds.iter().map(|c| c.index()).collect();
    let t: Vec<usize> = labels.iter().map(|c| c.index()).collect();
    confusion(&p, &t, &class_names())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub f1_macro: f64,
    /// Percent correct.
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 (0/0 → 0) and macro-F1 over every class of
/// the matrix, present in the data or not.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> MetricsReport {
    let k = cm.num_classes();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..k).map(|t| cm.counts[t][c]).sum();
            let support: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let f1_macro = per_class.iter().map(|m| m.f1).sum::<f64>() / k as f64;
    MetricsReport {
        f1_macro,
        accuracy: 100.0 * ratio(cm.trace(), cm.total()),
        per_class,
        confusion: cm.clone(),
    }
}

/// Metrics over the four appearance classes.
pub fn metrics(preds: &[ClassLabel], labels: &[ClassLabel]) -> Result<MetricsReport> {
    Ok(metrics_from_confusion(&confusion_labels(preds, labels)?))
}

pub fn metrics_indexed(preds: &[usize], labels: &[usize], names: &[String]) -> Result<MetricsReport> {
    Ok(metrics_from_confusion(&confusion(preds, labels, names)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KFoldSummary {
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// `"m ± s"` with four decimals.
    pub f1_display: String,
    /// `"m ± s"` with two decimals.
    pub acc_display: String,
    pub per_fold: Vec<MetricsReport>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn kfold_summary(reports: &[MetricsReport]) -> Result<KFoldSummary> {
    if reports.len() < 2 {
        return Err(Error::Validation(format!("k-fold summary needs >= 2 folds, got {}", reports.len())));
    }
    let f1: Vec<f64> = reports.iter().map(|r| r.f1_macro).collect();
    let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let (mean_f1, std_f1) = mean_std(&f1);
    let (mean_acc, std_acc) = mean_std(&acc);
    Ok(KFoldSummary {
        mean_f1,
        std_f1,
        mean_acc,
        std_acc,
        f1_display: format!("{mean_f1:.4} ± {std_f1:.4}"),
        acc_display: format!("{mean_acc:.2} ± {std_acc:.2}"),
        per_fold: reports.to_vec(),
    })
}

/// The four binary tasks of the pairwise ablation. The first-named class is
/// the positive one; `PositiveNegative` merges every pneumonia class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ClassPair {
    TypicalIndeterminate,
    AtypicalIndeterminate,
    TypicalAtypical,
    PositiveNegative,
}

impl ClassPair {
    pub const ALL: [ClassPair; 4] = [
        Self::TypicalIndeterminate,
        Self::AtypicalIndeterminate,
        Self::TypicalAtypical,
        Self::PositiveNegative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::TypicalIndeterminate => "typical-indeterminate",
            Self::AtypicalIndeterminate => "atypical-indeterminate",
            Self::TypicalAtypical => "typical-atypical",
            Self::PositiveNegative => "positive-negative",
        }
    }

    /// Names of the (negative, positive) binary classes.
    pub fn class_names(self) -> Vec<String> {
        let (neg, pos) = match self {
            Self::TypicalIndeterminate => ("indeterminate", "typical"),
            Self::AtypicalIndeterminate => ("indeterminate", "atypical"),
            Self::TypicalAtypical => ("atypical", "typical"),
            Self::PositiveNegative => ("negative", "positive"),
        };
        vec![neg.to_string(), pos.to_string()]
    }

    /// Binary target (1 = positive) or `None` when the record is dropped.
    pub fn relabel(self, label: ClassLabel) -> Option<usize> {
        use ClassLabel::*;
        match (self, label) {
            (Self::TypicalIndeterminate, Typical) => Some(1),
            (Self::TypicalIndeterminate, Indeterminate) => Some(0),
            (Self::AtypicalIndeterminate, Atypical) => Some(1),
            (Self::AtypicalIndeterminate, Indeterminate) => Some(0),
            (Self::TypicalAtypical, Typical) => Some(1),
            (Self::TypicalAtypical, Atypical) => Some(0),
            (Self::PositiveNegative, Negative) => Some(0),
            (Self::PositiveNegative, _) => Some(1),
            _ => None,
        }
    }
}

impl std::str::FromStr for ClassPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown class pair `{s}`")))
    }
}

/// One row of the pairwise ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BinaryReport {
    pub pair: ClassPair,
    /// F1 of the positive class (primary figure).
    pub f1_positive: f64,
    pub f1_macro: f64,
    pub accuracy: f64,
    pub report: MetricsReport,
}

pub fn binary_report(pair: ClassPair, preds: &[usize], labels: &[usize]) -> Result<BinaryReport> {
    let report = metrics_indexed(preds, labels, &pair.class_names())?;
    Ok(BinaryReport {
        pair,
        f1_positive: report.per_class[1].f1,
        f1_macro: report.f1_macro,
        accuracy: report.accuracy,
        report,
    })
}

/// Pairwise table as CSV: `pair,f1Positive,f1Macro,accuracy`.
pub fn write_ablation_csv(rows: &[BinaryReport], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("pair,f1Positive,f1Macro,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.2}\n",
            r.pair.name(),
            r.f1_positive,
            r.f1_macro,
            r.accuracy
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::*;

    #[test]
    fn perfect_predictions() {
        let labels = [Negative, Typical, Indeterminate, Atypical, Typical];
        let r = metrics(&labels, &labels).unwrap();
        assert_eq!(r.f1_macro, 1.0);
        assert_eq!(r.accuracy, 100.0);
        for (i, row) in r.confusion.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c > 0, i == j);
            }
        }
    }

    #[test]
    fn all_negative_predictions_fill_one_column() {
        let labels = [Negative, Typical, Indeterminate, Atypical];
        let cm = confusion_labels(&[Negative; 4], &labels).unwrap();
        for row in &cm.counts {
            assert_eq!(row[1..].iter().sum::<u64>(), 0);
        }
    }

    #[test]
    fn degenerate_two_class_case() {
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let r = metrics_indexed(&[0; 20], &labels, &names).unwrap();
        assert_eq!(r.accuracy, 50.0);
        assert_eq!(r.f1_macro, (2.0 / 3.0) / 2.0);
    }

    #[test]
    fn kfold_two_points() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut a = metrics_indexed(&[0, 1], &[0, 1], &names).unwrap();
        let mut b = a.clone();
        a.f1_macro = 0.4;
        b.f1_macro = 0.5;
        let s = kfold_summary(&[a.clone(), b]).unwrap();
        assert!((s.mean_f1 - 0.45).abs() < 1e-12 && (s.std_f1 - 0.05).abs() < 1e-12);
        assert_eq!(s.f1_display, "0.4500 ± 0.0500");
        assert_eq!(kfold_summary(&[a.clone(), a.clone()]).unwrap().std_acc, 0.0);
        assert!(kfold_summary(&[a]).is_err());
    }

    #[test]
    fn pair_relabelling() {
        assert_eq!(ClassPair::PositiveNegative.relabel(Typical), Some(1));
        assert_eq!(ClassPair::PositiveNegative.relabel(Negative), Some(0));
        for l in [Negative, Indeterminate] {
            assert_eq!(ClassPair::TypicalAtypical.relabel(l), None);
        }
        assert_eq!("typical-atypical".parse::<ClassPair>().unwrap(), ClassPair::TypicalAtypical);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(confusion_labels(&[Negative], &[]).is_err());
        assert!(confusion_labels(&[], &[]).is_err());
    }
}
