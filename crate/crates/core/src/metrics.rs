//! Macro-averaged classification metrics, precision-recall curves with
//! step-interpolated average precision, and time-weighted F1.
//!
//! Every 0/0 quotient is defined as 0.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ClassCounts, ConfusionMatrix, DomainError, PredictionRecord};

/// Points on the shared recall grid used for the macro PR curve.
pub const RECALL_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("confusion matrix is empty: accuracy undefined")]
    EmptyMatrix,
    #[error("class {0} has no positive examples")]
    NoPositives(usize),
    #[error("no class has positive examples")]
    NoClassWithPositives,
    #[error("total duration is zero")]
    ZeroDuration,
    #[error("segment duration {0} s is negative")]
    NegativeDuration(f64),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class TP/FP/FN derived from the matrix diagonal, column and row sums.
pub fn class_counts(cm: &ConfusionMatrix) -> Vec<ClassCounts> {
    let k = cm.num_classes();
    (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let col: u64 = (0..k).map(|r| cm.get(r, c)).sum();
            let row: u64 = cm.row(c).iter().sum();
            ClassCounts {
                true_pos: tp,
                false_pos: col - tp,
                false_neg: row - tp,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn precision_recall_f1(c: &ClassCounts) -> Prf {
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos);
    let recall = ratio(c.true_pos, c.true_pos + c.false_neg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<Prf>,
}

/// Unweighted means of per-class precision, recall and F1, plus accuracy.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let per_class: Vec<Prf> = class_counts(cm).iter().map(precision_recall_f1).collect();
    let k = per_class.len() as f64;
    let mean = |f: fn(&Prf) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    Ok(MacroMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        accuracy: cm.trace() as f64 / total as f64,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall points ordered by non-decreasing recall.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Interpolated precision at `recall`: the best precision reached at any
    /// recall at least as large. Zero when the curve never gets there.
    pub fn interpolated_precision(&self, recall: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.recall >= recall)
            .map(|p| p.precision)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPr {
    pub class: usize,
    pub curve: PrCurve,
    pub average_precision: f64,
}

/// One-vs-rest threshold sweep for `class`.
///
/// Thresholds are the distinct confidence values for the class in descending
/// order; tied records cross a threshold together. Average precision is the
/// step sum of `(R_n - R_{n-1}) * P_n`.
pub fn pr_curve(records: &[PredictionRecord], class: usize) -> Result<ClassPr, MetricsError> {
    let positives = records.iter().filter(|r| r.true_class == class).count() as u64;
    if positives == 0 {
        return Err(MetricsError::NoPositives(class));
    }
    let mut scored: Vec<(f64, bool)> = records
        .iter()
        .map(|r| (r.confidences[class], r.true_class == class))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let mut ap = 0.0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = ratio(tp, positives);
        let precision = ratio(tp, tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint { recall, precision });
    }
    Ok(ClassPr {
        class,
        curve: PrCurve { points },
        average_precision: ap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPr {
    /// Mean interpolated precision on the shared recall grid.
    pub curve: PrCurve,
    /// Mean of per-class average precision over the included classes.
    pub macro_auc: f64,
    pub per_class: Vec<ClassPr>,
    /// Classes without positives, left out of both averages.
    pub excluded: Vec<usize>,
}

pub fn recall_grid() -> impl Iterator<Item = f64> {
    (0..RECALL_GRID_POINTS).map(|i| i as f64 / (RECALL_GRID_POINTS - 1) as f64)
}

pub fn macro_pr(records: &[PredictionRecord], num_classes: usize) -> Result<MacroPr, MetricsError> {
    for r in records {
        r.validate(num_classes)?;
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for class in 0..num_classes {
        match pr_curve(records, class) {
            Ok(c) => per_class.push(c),
            Err(MetricsError::NoPositives(c)) => excluded.push(c),
            Err(e) => return Err(e),
        }
    }
    if per_class.is_empty() {
        return Err(MetricsError::NoClassWithPositives);
    }
    let n = per_class.len() as f64;
    let points = recall_grid()
        .map(|recall| PrPoint {
            recall,
            precision: per_class
                .iter()
                .map(|c| c.curve.interpolated_precision(recall))
                .sum::<f64>()
                / n,
        })
        .collect();
    let macro_auc = per_class.iter().map(|c| c.average_precision).sum::<f64>() / n;
    Ok(MacroPr {
        curve: PrCurve { points },
        macro_auc,
        per_class,
        excluded,
    })
}

/// Write `class,recall,precision` rows: every included class on the recall
/// grid, then the macro curve under the pseudo-class `macro`.
pub fn write_pr_csv<W: Write>(mut out: W, labels: &[String], pr: &MacroPr) -> io::Result<()> {
    writeln!(out, "class,recall,precision")?;
    for c in &pr.per_class {
        let label = labels.get(c.class).map(String::as_str).unwrap_or("?");
        for r in recall_grid() {
            writeln!(
                out,
                "{},{:.2},{:.6}",
                csv_field(label),
                r,
                c.curve.interpolated_precision(r)
            )?;
        }
    }
    for p in &pr.curve.points {
        writeln!(out, "macro,{:.2},{:.6}", p.recall, p.precision)?;
    }
    Ok(())
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// A stretch of working time spent at one F1 level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedSegment {
    pub duration_s: f64,
    pub f1_pct: f64,
}

/// Duration-weighted mean F1 over the segments.
pub fn time_weighted_f1(segments: &[TimedSegment]) -> Result<f64, MetricsError> {
    if let Some(s) = segments.iter().find(|s| s.duration_s < 0.0) {
        return Err(MetricsError::NegativeDuration(s.duration_s));
    }
    let total: f64 = segments.iter().map(|s| s.duration_s).sum();
    if total <= 0.0 {
        return Err(MetricsError::ZeroDuration);
    }
    Ok(segments.iter().map(|s| s.duration_s * s.f1_pct).sum::<f64>() / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64) -> ClassCounts {
        ClassCounts {
            true_pos: tp,
            false_pos: fp,
            false_neg: fn_,
        }
    }

    fn rec(true_class: usize, confidences: &[f64]) -> PredictionRecord {
        PredictionRecord {
            true_class,
            confidences: confidences.to_vec(),
        }
    }

    /// Binary records where class 0's score is given and class 1 gets the rest.
    fn binary(pos: &[f64], neg: &[f64]) -> Vec<PredictionRecord> {
        pos.iter()
            .map(|&s| rec(0, &[s, 1.0 - s]))
            .chain(neg.iter().map(|&s| rec(1, &[s, 1.0 - s])))
            .collect()
    }

    #[test]
    fn class_counts_examples() {
        let cm = ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 3]]).unwrap();
        assert_eq!(class_counts(&cm), vec![counts(5, 0, 0), counts(3, 0, 0)]);

        let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![1, 3]]).unwrap();
        assert_eq!(class_counts(&cm), vec![counts(8, 1, 2), counts(3, 2, 1)]);

        let cm = ConfusionMatrix::from_rows(&[vec![0; 3], vec![0; 3], vec![0; 3]]).unwrap();
        assert!(class_counts(&cm).iter().all(|c| *c == ClassCounts::default()));
    }

    #[test]
    fn prf_examples() {
        let m = precision_recall_f1(&counts(8, 2, 2));
        assert!((m.precision - 0.8).abs() < 1e-12);
        assert!((m.recall - 0.8).abs() < 1e-12);
        assert!((m.f1 - 0.8).abs() < 1e-12);

        let m = precision_recall_f1(&counts(0, 0, 0));
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));

        let m = precision_recall_f1(&counts(3, 1, 2));
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn macro_metrics_hand_example() {
        // class 0: P = R = 8/10; class 1: P = R = 3/5
        let cm = ConfusionMatrix::from_rows(&[vec![8, 2], vec![2, 3]]).unwrap();
        let m = macro_metrics(&cm).unwrap();
        assert!((m.f1 - 0.7).abs() < 1e-12);
        assert!((m.precision - 0.7).abs() < 1e-12);
        assert!((m.accuracy - 11.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn macro_metrics_perfect_and_empty() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 1, 0], vec![0, 0, 9]]).unwrap();
        let m = macro_metrics(&cm).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
        let cm = ConfusionMatrix::from_rows(&[vec![0, 0], vec![0, 0]]).unwrap();
        assert_eq!(macro_metrics(&cm), Err(MetricsError::EmptyMatrix));
    }

    #[test]
    fn average_precision_hand_enumeration() {
        // thresholds .9 (R .5, P 1), .8 (R .5, P .5), .7 (R 1, P 2/3), .3 (R 1, P .5)
        let pr = pr_curve(&binary(&[0.9, 0.7], &[0.8, 0.3]), 0).unwrap();
        assert!((pr.average_precision - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(pr.curve.points.len(), 4);
    }

    #[test]
    fn average_precision_perfect_and_inverted_ranking() {
        let pr = pr_curve(&binary(&[0.9, 0.8, 0.7], &[0.2, 0.1]), 0).unwrap();
        assert_eq!(pr.average_precision, 1.0);
        // all positives at 0, negatives at 1: recall only reaches 1 once everything is in
        let pr = pr_curve(&binary(&[0.0, 0.0], &[1.0, 1.0, 1.0]), 0).unwrap();
        assert!((pr.average_precision - 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn pr_curve_requires_positives() {
        assert_eq!(
            pr_curve(&binary(&[], &[0.4]), 0),
            Err(MetricsError::NoPositives(0))
        );
    }

    #[test]
    fn macro_pr_means_class_ap() {
        let perfect = vec![rec(0, &[0.9, 0.1]), rec(1, &[0.2, 0.8])];
        let m = macro_pr(&perfect, 2).unwrap();
        assert_eq!(m.macro_auc, 1.0);
        assert_eq!(m.curve.points.len(), RECALL_GRID_POINTS);

        // class 0: both positives outrank the negative -> AP = 1.0
        // class 1: its positive (0.4) sits below one negative (0.5) -> AP = 0.5
        let recs = vec![rec(0, &[0.9, 0.5]), rec(0, &[0.7, 0.1]), rec(1, &[0.6, 0.4])];
        let m = macro_pr(&recs, 2).unwrap();
        assert!((m.per_class[0].average_precision - 1.0).abs() < 1e-12);
        assert!((m.per_class[1].average_precision - 0.5).abs() < 1e-12);
        assert!((m.macro_auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn macro_pr_excludes_empty_classes() {
        let recs = vec![rec(0, &[0.9, 0.05, 0.05]), rec(2, &[0.1, 0.1, 0.8])];
        let m = macro_pr(&recs, 3).unwrap();
        assert_eq!(m.excluded, vec![1]);
        assert_eq!(m.per_class.len(), 2);
    }

    #[test]
    fn pr_csv_layout() {
        let recs = vec![rec(0, &[0.9, 0.1]), rec(1, &[0.2, 0.8])];
        let m = macro_pr(&recs, 2).unwrap();
        let mut buf = Vec::new();
        write_pr_csv(&mut buf, &["a".into(), "b,c".into()], &m).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "class,recall,precision");
        assert_eq!(lines.len(), 1 + 3 * RECALL_GRID_POINTS);
        assert_eq!(lines[1], "a,0.00,1.000000");
        assert!(lines[102].starts_with("\"b,c\",0.00"));
        assert_eq!(*lines.last().unwrap(), "macro,1.00,1.000000");
    }

    #[test]
    fn time_weighted_f1_examples() {
        let seg = |h: f64, f1: f64| TimedSegment {
            duration_s: h * 3600.0,
            f1_pct: f1,
        };
        let s4 = time_weighted_f1(&[seg(5.0, 78.14), seg(5.3837, 74.99)]).unwrap();
        assert!((s4 - 76.51).abs() < 0.005, "{s4}");
        let s7 = time_weighted_f1(&[seg(5.0, 78.14), seg(2.6919, 74.99), seg(4.5690, 70.08)]).unwrap();
        assert!((s7 - 74.44).abs() < 0.005, "{s7}");
        assert_eq!(time_weighted_f1(&[seg(3.3, 71.5)]).unwrap(), 71.5);
        assert_eq!(time_weighted_f1(&[seg(0.0, 71.5)]), Err(MetricsError::ZeroDuration));
        assert_eq!(time_weighted_f1(&[]), Err(MetricsError::ZeroDuration));
    }

    fn arb_matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (1usize..=6).prop_flat_map(|k| {
            proptest::collection::vec(proptest::collection::vec(0u64..=30, k), k)
        })
    }

    proptest! {
        #[test]
        fn prf_stays_in_unit_interval(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
            let m = precision_recall_f1(&counts(tp, fp, fn_));
            for v in [m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if m.precision == 0.0 || m.recall == 0.0 {
                prop_assert_eq!(m.f1, 0.0);
            }
        }

        #[test]
        fn macro_f1_between_class_extremes(rows in arb_matrix()) {
            let cm = ConfusionMatrix::from_rows(&rows).unwrap();
            prop_assume!(cm.total() > 0);
            let m = macro_metrics(&cm).unwrap();
            let lo = m.per_class.iter().map(|c| c.f1).fold(f64::INFINITY, f64::min);
            let hi = m.per_class.iter().map(|c| c.f1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m.f1 >= lo - 1e-12 && m.f1 <= hi + 1e-12);
        }

        #[test]
        fn time_weighted_f1_bounded(segs in proptest::collection::vec((0.0f64..1e5, 0.0f64..=100.0), 1..8)) {
            let segs: Vec<_> = segs.into_iter().map(|(d, f)| TimedSegment { duration_s: d, f1_pct: f }).collect();
            prop_assume!(segs.iter().map(|s| s.duration_s).sum::<f64>() > 0.0);
            let v = time_weighted_f1(&segs).unwrap();
            let lo = segs.iter().map(|s| s.f1_pct).fold(f64::INFINITY, f64::min);
            let hi = segs.iter().map(|s| s.f1_pct).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }

        #[test]
        fn ap_invariant_under_duplication(
            raw in proptest::collection::vec((0usize..3, 0u8..=10, 0u8..=10, 0u8..=10), 1..30)
        ) {
            let recs: Vec<_> = raw.iter()
                .map(|&(t, a, b, c)| rec(t, &[a as f64 / 10.0, b as f64 / 10.0, c as f64 / 10.0]))
                .collect();
            let doubled: Vec<_> = recs.iter().chain(recs.iter()).cloned().collect();
            for class in 0..3 {
                match (pr_curve(&recs, class), pr_curve(&doubled, class)) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a.average_precision, b.average_precision),
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "positives disagree"),
                }
            }
        }

        #[test]
        fn macro_auc_ignores_class_order(
            raw in proptest::collection::vec((0usize..3, 0u8..=10, 0u8..=10, 0u8..=10), 1..30)
        ) {
            let recs: Vec<_> = raw.iter()
                .map(|&(t, a, b, c)| rec(t, &[a as f64 / 10.0, b as f64 / 10.0, c as f64 / 10.0]))
                .collect();
            // rotate classes: 0 -> 1 -> 2 -> 0
            let rotated: Vec<_> = recs.iter()
                .map(|r| rec((r.true_class + 1) % 3, &[r.confidences[2], r.confidences[0], r.confidences[1]]))
                .collect();
            if let (Ok(a), Ok(b)) = (macro_pr(&recs, 3), macro_pr(&rotated, 3)) {
                prop_assert!((a.macro_auc - b.macro_auc).abs() < 1e-12);
            }
        }
    }
}
