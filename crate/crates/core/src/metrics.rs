//! Video-level ROC-AUC.

use crate::error::{Error, Result};
use crate::ingest::Label;

/// Probability that a random fake outscores a random real, ties counted
/// one half. Counting is done in integer half-units so the result is exact.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let mut real: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == Label::Real)
        .map(|(&s, _)| s)
        .collect();
    let fake: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == Label::Fake)
        .map(|(&s, _)| s)
        .collect();
    if real.is_empty() || fake.is_empty() {
        return Err(Error::SingleClass);
    }
    real.sort_by(f64::total_cmp);
    let mut half_units: u64 = 0;
    for &f in &fake {
        let below = real.partition_point(|&r| r < f) as u64;
        let upto = real.partition_point(|&r| r <= f) as u64;
        half_units += 2 * below + (upto - below);
    }
    Ok(half_units as f64 / (2 * real.len() as u64 * fake.len() as u64) as f64)
}
