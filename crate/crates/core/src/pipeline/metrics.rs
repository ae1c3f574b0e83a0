use std::fmt;

use crate::streamline::Class;

use super::{PipelineError, Result};

/// Binary classification metrics with the target class as positive. Ratios
/// whose denominator is zero are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let total = (tp + fp + fn_ + tn) as f64;
        let precision = ratio(tp as f64, (tp + fp) as f64);
        let recall = ratio(tp as f64, (tp + fn_) as f64);
        Self {
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio((tp + tn) as f64, total),
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
        }
    }
}

/// Percentages with three decimals, e.g. `acc=96.646 f1=84.316 prec=... rec=...`.
impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "acc={:.3} f1={:.3} prec={:.3} rec={:.3}",
            100.0 * self.accuracy,
            100.0 * self.f1,
            100.0 * self.precision,
            100.0 * self.recall
        )
    }
}

pub fn evaluate(pred: &[Class], truth: &[Class]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(PipelineError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (Class::Target, Class::Target) => tp += 1,
            (Class::Target, Class::NonTarget) => fp += 1,
            (Class::NonTarget, Class::Target) => fn_ += 1,
            (Class::NonTarget, Class::NonTarget) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}
