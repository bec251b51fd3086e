//! Confusion counting and the five evaluation measures: precision, recall,
//! f1, accuracy and AUROC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default decision threshold; a score >= threshold predicts the positive
/// class.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Counts of true/false positives/negatives over an evaluated set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// Swap the roles of the classes.
    pub fn complement(&self) -> ConfusionCounts {
        ConfusionCounts {
            true_pos: self.true_neg,
            true_neg: self.true_pos,
            false_pos: self.false_neg,
            false_neg: self.false_pos,
        }
    }
}

/// Count predictions at a threshold: predict 1 iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "confusion needs equal-length nonempty inputs, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts {
        true_pos: 0,
        true_neg: 0,
        false_pos: 0,
        false_neg: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        if l > 1 {
            return Err(Error::Data(format!("label {l} outside {{0, 1}}")));
        }
        let predicted = s >= threshold;
        match (predicted, l == 1) {
            (true, true) => c.true_pos += 1,
            (false, false) => c.true_neg += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.true_pos, c.true_pos + c.false_pos).0
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.true_pos, c.true_pos + c.false_neg).0
}

pub fn accuracy(c: &ConfusionCounts) -> f64 {
    ratio(c.true_pos + c.true_neg, c.total()).0
}

/// Harmonic mean of precision and recall; 0 when both vanish.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let p = precision(c);
    let r = recall(c);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Area under the ROC curve via the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counted one half.
///
/// Computed with average ranks in O(n log n); identical to the pairwise
/// definition and to trapezoidal integration of the ROC curve.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Data(format!(
            "auroc needs equal-length nonempty inputs, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("label {bad} outside {{0, 1}}")));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data(
            "auroc undefined: needs at least one positive and one negative label".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tied runs, then sum ranks of positives.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// How precision/recall/f1 are aggregated over the two classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Metrics of the positive class (label 1).
    #[default]
    Positive,
    /// Unweighted mean of both classes' metrics.
    Macro,
}

/// The five measures plus the bookkeeping needed to reproduce them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub task: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub auroc: f64,
    pub threshold: f64,
    pub n_examples: usize,
    pub averaging: Averaging,
    /// Names of metrics whose denominator was zero and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn from_scores(
        model: &str,
        task: &str,
        scores: &[f64],
        labels: &[u8],
        threshold: f64,
        averaging: Averaging,
    ) -> Result<MetricsReport> {
        let c = confusion(scores, labels, threshold)?;
        let mut warnings = Vec::new();
        let mut tracked = |name: &str, (value, degenerate): (f64, bool)| {
            if degenerate {
                warnings.push(name.to_string());
            }
            value
        };
        let (p, r, f) = match averaging {
            Averaging::Positive => {
                let p = tracked("precision", ratio(c.true_pos, c.true_pos + c.false_pos));
                let r = tracked("recall", ratio(c.true_pos, c.true_pos + c.false_neg));
                (p, r, f1(&c))
            }
            Averaging::Macro => {
                let cc = c.complement();
                let p = tracked("precision", ratio(c.true_pos, c.true_pos + c.false_pos));
                let pc = tracked(
                    "precision(negative)",
                    ratio(cc.true_pos, cc.true_pos + cc.false_pos),
                );
                let r = tracked("recall", ratio(c.true_pos, c.true_pos + c.false_neg));
                let rc = tracked(
                    "recall(negative)",
                    ratio(cc.true_pos, cc.true_pos + cc.false_neg),
                );
                (
                    (p + pc) / 2.0,
                    (r + rc) / 2.0,
                    (f1(&c) + f1(&cc)) / 2.0,
                )
            }
        };
        Ok(MetricsReport {
            model: model.to_string(),
            task: task.to_string(),
            precision: p,
            recall: r,
            f1: f,
            accuracy: accuracy(&c),
            auroc: auroc(scores, labels)?,
            threshold,
            n_examples: c.total(),
            averaging,
            warnings,
        })
    }

    /// Aligned plain-text table with one row per report.
    pub fn format_table(reports: &[MetricsReport]) -> String {
        let mut rows = vec![vec![
            "Model".to_string(),
            "Precision".to_string(),
            "Recall".to_string(),
            "F1-score".to_string(),
            "Accuracy".to_string(),
            "Auroc".to_string(),
        ]];
        for r in reports {
            rows.push(vec![
                r.model.clone(),
                format_metric(r.precision),
                format_metric(r.recall),
                format_metric(r.f1),
                format_metric(r.accuracy),
                format_metric(r.auroc),
            ]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|c| rows.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        rows.iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(c, cell)| format!("{cell:<width$}", width = widths[c]))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Three-decimal rounding with trailing zeros trimmed (but at least one
/// decimal digit), so 1 prints as "1.0", 0.98 as "0.98", 0.975 as "0.975".
pub fn format_metric(v: f64) -> String {
    let mut s = format!("{v:.3}");
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn confusion_worked_example() {
        let c = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 1,
                true_neg: 1,
                false_pos: 0,
                false_neg: 0
            }
        );
        assert_eq!(precision(&c), 1.0);
        assert_eq!(recall(&c), 1.0);
        assert_eq!(accuracy(&c), 1.0);
        assert_eq!(f1(&c), 1.0);
    }

    #[test]
    fn threshold_boundary_counts_as_positive() {
        let c = confusion(&[0.5], &[0], 0.5).unwrap();
        assert_eq!(c.false_pos, 1);
        assert_eq!(c.total(), 1);
    }

    #[test]
    fn confusion_rejects_empty_and_bad_labels() {
        assert!(matches!(confusion(&[], &[], 0.5), Err(Error::Data(_))));
        assert!(matches!(
            confusion(&[0.5], &[3], 0.5),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn confusion_matches_brute_force_recount() {
        let mut r = rng::stream(11, &[1]);
        let scores: Vec<f64> = (0..1000).map(|_| r.random::<f64>()).collect();
        let labels: Vec<u8> = (0..1000).map(|_| r.random_range(0..=1u8)).collect();
        let c = confusion(&scores, &labels, 0.5).unwrap();

        // Independent recount, one comparison at a time.
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for i in 0..1000 {
            let pred = scores[i] >= 0.5;
            if pred && labels[i] == 1 {
                tp += 1;
            } else if !pred && labels[i] == 0 {
                tn += 1;
            } else if pred {
                fp += 1;
            } else {
                fn_ += 1;
            }
        }
        assert_eq!((c.true_pos, c.true_neg, c.false_pos, c.false_neg), (tp, tn, fp, fn_));
    }

    #[test]
    fn ratio_metrics_worked_example() {
        let c = ConfusionCounts {
            true_pos: 8,
            true_neg: 8,
            false_pos: 2,
            false_neg: 2,
        };
        assert_eq!(precision(&c), 0.8);
        assert_eq!(recall(&c), 0.8);
        assert!((f1(&c) - 0.8).abs() < 1e-15);
        assert_eq!(accuracy(&c), 0.8);
    }

    #[test]
    fn zero_denominator_flags_warning() {
        // No predicted positives: precision degenerate.
        let report =
            MetricsReport::from_scores("m", "t", &[0.1, 0.2], &[1, 0], 0.5, Averaging::Positive)
                .unwrap();
        assert_eq!(report.precision, 0.0);
        assert!(report.warnings.contains(&"precision".to_string()));
    }

    #[test]
    fn f1_is_harmonic_mean_identity() {
        let c = ConfusionCounts {
            true_pos: 39,
            true_neg: 55,
            false_pos: 1,
            false_neg: 5,
        };
        let (p, r) = (precision(&c), recall(&c));
        assert!((f1(&c) - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn auroc_perfect_and_worked_example() {
        assert_eq!(auroc(&[0.8, 0.9, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        // Pairs: (0.9,0.8) ok, (0.9,0.1) ok, (0.7,0.8) wrong, (0.7,0.1) ok.
        let v = auroc(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let v = auroc(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auroc_single_class_is_error() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn auroc_complement_identity_without_ties() {
        let mut r = rng::stream(5, &[2]);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..50).map(|_| r.random::<f64>()).collect();
            let labels: Vec<u8> = (0..49)
                .map(|_| r.random_range(0..=1u8))
                .chain([1u8]) // guarantee both classes together with next line
                .collect();
            let mut labels = labels;
            labels[0] = 0;
            let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc(&scores, &flipped).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut r = rng::stream(6, &[3]);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..60).map(|_| r.random::<f64>()).collect();
            let mut labels: Vec<u8> = (0..60).map(|_| r.random_range(0..=1u8)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let a = auroc(&scores, &labels).unwrap();
            // Random strictly increasing map: x -> alpha*exp(x) + beta*x^3.
            let alpha = r.random_range(0.1..2.0);
            let beta = r.random_range(0.1..2.0);
            let mapped: Vec<f64> = scores
                .iter()
                .map(|&x| alpha * x.exp() + beta * x.powi(3))
                .collect();
            let b = auroc(&mapped, &labels).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn table_row_matches_reference_formatting() {
        let report = MetricsReport {
            model: "VGG16".into(),
            task: "lung_subtype".into(),
            precision: 0.975,
            recall: 0.975,
            f1: 0.98,
            accuracy: 0.98,
            auroc: 0.999,
            threshold: 0.5,
            n_examples: 2000,
            averaging: Averaging::Positive,
            warnings: Vec::new(),
        };
        let table = MetricsReport::format_table(&[report]);
        let mut lines = table.lines();
        let header = lines.next().unwrap();
        for col in ["Model", "Precision", "Recall", "F1-score", "Accuracy", "Auroc"] {
            assert!(header.contains(col), "{header}");
        }
        let row = lines.next().unwrap();
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cells, vec!["VGG16", "0.975", "0.975", "0.98", "0.98", "0.999"]);
    }

    #[test]
    fn metric_formatting_trims_zeros() {
        assert_eq!(format_metric(1.0), "1.0");
        assert_eq!(format_metric(0.98), "0.98");
        assert_eq!(format_metric(0.975), "0.975");
        assert_eq!(format_metric(0.9994), "0.999");
    }

    #[test]
    fn macro_averaging_symmetric_case() {
        // Balanced symmetric confusion: macro equals positive-class values.
        let scores = [0.9, 0.9, 0.1, 0.1, 0.9, 0.1];
        let labels = [1, 1, 0, 0, 0, 1];
        let pos =
            MetricsReport::from_scores("m", "t", &scores, &labels, 0.5, Averaging::Positive)
                .unwrap();
        let mac =
            MetricsReport::from_scores("m", "t", &scores, &labels, 0.5, Averaging::Macro).unwrap();
        assert!((pos.accuracy - mac.accuracy).abs() < 1e-12);
        assert!((mac.precision - pos.precision).abs() < 1e-12);
    }
}
