//! Bi-stream audio/video model, its losses, and modality dissonance scoring.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, TensorInfo};
pub use model::{Mode, Model, ModelConfig, SegmentInput, StreamOutputs};
pub use train::{
    batch_gradients, batch_loss, segment_distances, train, BatchLoss, EpochStats, TrainConfig,
    TrainItem,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;

/// Which label the squared-distance term of the contrastive loss pulls
/// together. `Semantic` pulls real pairs; `Verbatim` pulls fake pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelConvention {
    #[default]
    Semantic,
    Verbatim,
}

impl LabelConvention {
    /// Label value `y` as it enters the loss formula.
    pub fn effective(self, label: Label) -> f64 {
        match self {
            LabelConvention::Semantic => label.as_f64(),
            LabelConvention::Verbatim => 1.0 - label.as_f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub label_convention: LabelConvention,
    pub prob_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.99,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            label_convention: LabelConvention::Semantic,
            prob_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.prob_eps > 0.0 && self.prob_eps < 0.5) {
            return Err(Error::Config(format!(
                "prob_eps {} outside (0, 0.5)",
                self.prob_eps
            )));
        }
        Ok(())
    }
}

pub fn segment_distance(f_v: &[f64], f_a: &[f64]) -> f64 {
    assert_eq!(f_v.len(), f_a.len(), "embedding dims differ");
    f_v.iter()
        .zip(f_a)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Contrastive term for one pair.
pub fn contrastive_term(distance: f64, label: Label, cfg: &LossConfig) -> f64 {
    let y = cfg.label_convention.effective(label);
    let hinge = (cfg.margin - distance).max(0.0);
    (1.0 - y) * distance * distance + y * hinge * hinge
}

/// Mean contrastive term over all (video, segment) pairs.
pub fn contrastive_loss(distances: &[f64], labels: &[Label], cfg: &LossConfig) -> Result<f64> {
    if distances.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} distances but {} labels",
            distances.len(),
            labels.len()
        )));
    }
    if distances.is_empty() {
        return Err(Error::EmptyDistances);
    }
    let sum: f64 = distances
        .iter()
        .zip(labels)
        .map(|(&d, &l)| contrastive_term(d, l, cfg))
        .sum();
    Ok(sum / distances.len() as f64)
}

/// Binary cross-entropy with `y_hat` clamped to `[1e-7, 1 - 1e-7]`.
pub fn cross_entropy(y_hat: f64, label: Label) -> f64 {
    let p = y_hat.clamp(1e-7, 1.0 - 1e-7);
    let y = label.as_f64();
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn cross_entropy_batch(y_hat: &[f64], labels: &[Label]) -> Result<f64> {
    if y_hat.len() != labels.len() || y_hat.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            y_hat.len(),
            labels.len()
        )));
    }
    Ok(y_hat
        .iter()
        .zip(labels)
        .map(|(&p, &l)| cross_entropy(p, l))
        .sum::<f64>()
        / y_hat.len() as f64)
}

pub fn total_loss(l1: f64, l2: f64, l3: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * l1 + cfg.lambda2 * l2 + cfg.lambda3 * l3
}

/// Mean of the per-segment distances of one video.
pub fn mds(distances: &[f64]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::EmptyDistances);
    }
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

/// Fake iff `mds >= tau` under the semantic convention; inverted otherwise.
pub fn classify(mds_value: f64, tau: f64, convention: LabelConvention) -> Label {
    let high = mds_value >= tau;
    let fake = match convention {
        LabelConvention::Semantic => high,
        LabelConvention::Verbatim => !high,
    };
    if fake {
        Label::Fake
    } else {
        Label::Real
    }
}

/// Midpoint between consecutive distinct sorted values that maximizes
/// balanced accuracy, smallest on ties. With a single distinct value that
/// value is returned.
pub fn select_threshold(
    values: &[f64],
    labels: &[Label],
    convention: LabelConvention,
) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores but {} labels",
            values.len(),
            labels.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite MDS value".into()));
    }
    let n_fake = labels.iter().filter(|&&l| l == Label::Fake).count() as u64;
    let n_real = labels.len() as u64 - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    // Sweep upward; `below_*` count items strictly under the candidate.
    let (mut below_real, mut below_fake) = (0u64, 0u64);
    let mut best: Option<(u64, f64)> = None;
    let mut k = 0;
    while k < order.len() {
        let v = values[order[k]];
        while k < order.len() && values[order[k]] == v {
            match labels[order[k]] {
                Label::Real => below_real += 1,
                Label::Fake => below_fake += 1,
            }
            k += 1;
        }
        if k == order.len() {
            break;
        }
        let tau = 0.5 * (v + values[order[k]]);
        // Correct counts scaled by the opposite class size: tpr + tnr in
        // integer units of 1 / (n_real * n_fake).
        let (correct_fake, correct_real) = match convention {
            LabelConvention::Semantic => (n_fake - below_fake, below_real),
            LabelConvention::Verbatim => (below_fake, n_real - below_real),
        };
        let score = correct_fake * n_real + correct_real * n_fake;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, tau));
        }
    }
    Ok(best.map(|(_, tau)| tau).unwrap_or(values[order[0]]))
}

/// Per-video scoring outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdsReport {
    pub video_id: String,
    pub distances: Vec<f64>,
    pub mds: f64,
    pub tau: f64,
    pub predicted: Label,
}

impl MdsReport {
    pub fn new(
        video_id: &str,
        distances: Vec<f64>,
        tau: f64,
        convention: LabelConvention,
    ) -> Result<Self> {
        let m = mds(&distances)?;
        Ok(Self {
            video_id: video_id.to_string(),
            distances,
            mds: m,
            tau,
            predicted: classify(m, tau, convention),
        })
    }
}
