//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::lattice::{Label, Lattice, LatticeError};

/// Set equality of two label sets.
pub fn exact_match(predicted: &[Label], truth: &[Label]) -> bool {
    predicted.iter().all(|l| truth.contains(l)) && truth.iter().all(|l| predicted.contains(l))
}

fn dedup(labels: &[Label]) -> Vec<&Label> {
    let mut out: Vec<&Label> = Vec::new();
    for l in labels {
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out
}

/// `(|Λ ∩ Λ*| / |Λ|, |Λ ∩ Λ*| / |Λ*|)`; `(0, 0)` if either set is empty.
pub fn precision_recall(predicted: &[Label], truth: &[Label]) -> (f64, f64) {
    let (p, t) = (dedup(predicted), dedup(truth));
    if p.is_empty() || t.is_empty() {
        return (0.0, 0.0);
    }
    let hit = p.iter().filter(|l| t.contains(l)).count() as f64;
    (hit / p.len() as f64, hit / t.len() as f64)
}

/// One propagated query in a total-order lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelCase {
    pub original: Label,
    pub chosen: Label,
    pub truth: Label,
}

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("label improvement needs a totally ordered lattice; use precision and recall instead")]
    NotTotalOrder,
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// `(improvement, missed)`.
///
/// Improvement: among cases whose ground truth is strictly below the
/// original label, the fraction where the chosen label equals the ground
/// truth. Missed: among cases where the chosen label is strictly below the
/// original, the fraction where it is also strictly below the ground truth.
pub fn label_improvement_metrics(lattice: &Lattice, cases: &[LabelCase]) -> Result<(f64, f64), MetricError> {
    if !lattice.is_total_order() {
        return Err(MetricError::NotTotalOrder);
    }
    let (mut improvable, mut exact, mut improved, mut missed) = (0usize, 0usize, 0usize, 0usize);
    for c in cases {
        if c.truth.lt(&c.original)? {
            improvable += 1;
            if c.chosen == c.truth {
                exact += 1;
            }
        }
        if c.chosen.lt(&c.original)? {
            improved += 1;
            if c.chosen.lt(&c.truth)? {
                missed += 1;
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((frac(exact, improvable), frac(missed, improved)))
}

fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_VARIANT: &str = "ROUGE-L F1 over lowercased alphanumeric tokens";

/// Token-level ROUGE-L F1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (rouge_tokens(candidate), rouge_tokens(reference));
    let l = lcs(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rc = l as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> MeanSd {
    let n = values.len();
    if n == 0 {
        return MeanSd::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    MeanSd { mean, sd, n }
}
