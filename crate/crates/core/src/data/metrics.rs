//! Accuracy, precision, recall and F1 with the sarcastic class as positive.

use std::fmt;

use crate::error::{CoreError, Result};

/// How precision, recall and F1 are aggregated over the two classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Sarcastic class only.
    #[default]
    Binary,
    /// Unweighted mean of both classes' scores.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// `num / den`, or 0 when the denominator is 0.
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean `2PR / (P + R)`, 0 when `P + R = 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

fn class_scores(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = ratio(tp as f64, (tp + fp) as f64);
    let r = ratio(tp as f64, (tp + fn_) as f64);
    (p, r, f1_score(p, r))
}

/// Scores `predicted` against `gold` (labels 0 or 1, 1 = sarcastic).
pub fn compute_metrics(
    predicted: &[u8],
    gold: &[u8],
    averaging: Averaging,
) -> Result<MetricsReport> {
    if predicted.len() != gold.len() {
        return Err(CoreError::Contract(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    if predicted.is_empty() {
        return Err(CoreError::Contract(
            "metrics need at least one sample".into(),
        ));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in predicted.iter().zip(gold) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            (0, 0) => tn += 1,
            _ => {
                return Err(CoreError::Data(format!(
                    "labels must be 0 or 1, got prediction {p} and gold {g}"
                )))
            }
        }
    }
    let accuracy = ratio((tp + tn) as f64, predicted.len() as f64);
    let (precision, recall, f1) = match averaging {
        Averaging::Binary => class_scores(tp, fp, fn_),
        Averaging::Macro => {
            let (p1, r1, f1) = class_scores(tp, fp, fn_);
            let (p0, r0, f0) = class_scores(tn, fn_, fp);
            ((p0 + p1) / 2.0, (r0 + r1) / 2.0, (f0 + f1) / 2.0)
        }
    };
    Ok(MetricsReport {
        tp,
        fp,
        fn_,
        tn,
        accuracy,
        precision,
        recall,
        f1,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy = {:.4}", self.accuracy)?;
        writeln!(f, "precision = {:.4}", self.precision)?;
        writeln!(f, "recall = {:.4}", self.recall)?;
        writeln!(f, "f1 = {:.4}", self.f1)?;
        writeln!(f, "tp = {}", self.tp)?;
        writeln!(f, "fp = {}", self.fp)?;
        writeln!(f, "fn = {}", self.fn_)?;
        write!(f, "tn = {}", self.tn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_denominators_are_zero() {
        let m = compute_metrics(&[0, 0], &[0, 0], Averaging::Binary).unwrap();
        assert_eq!(
            (m.precision, m.recall, m.f1, m.accuracy),
            (0.0, 0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn macro_averages_both_classes() {
        let m = compute_metrics(&[1, 0, 0, 0], &[1, 1, 0, 0], Averaging::Macro).unwrap();
        // class 1: P=1, R=0.5; class 0: P=2/3, R=1
        assert!((m.precision - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((m.recall - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(compute_metrics(&[1], &[1, 0], Averaging::Binary).is_err());
        assert!(compute_metrics(&[], &[], Averaging::Binary).is_err());
        assert!(compute_metrics(&[2], &[1], Averaging::Binary).is_err());
    }
}
