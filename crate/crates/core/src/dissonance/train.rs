use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Model, SegmentInput};
use super::{total_loss, LossConfig};
use crate::autodiff::{seeded_rng, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::ingest::{CropSequence, Label};
use crate::nn::{Adam, AdamConfig};
use crate::physmaps::PhysMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// One training segment with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub crops: CropSequence,
    pub maps: Option<PhysMap>,
    pub audio: Array2<f32>,
    pub label: Label,
}

impl TrainItem {
    pub fn input(&self) -> SegmentInput<'_> {
        SegmentInput {
            crops: &self.crops,
            maps: self.maps.as_ref(),
            audio: &self.audio,
        }
    }
}

/// Batch-averaged loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchLoss {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

struct ItemResult {
    l1: f64,
    l2: f64,
    l3: f64,
    grads: Vec<(crate::autodiff::ParamId, Vec<f64>)>,
}

fn item_pass(
    model: &Model,
    store: &ParamStore,
    item: &TrainItem,
    cfg: &LossConfig,
    scale: f64,
    with_grad: bool,
) -> Result<ItemResult> {
    let mut t = Tape::new();
    let out = model.forward_tape(&mut t, store, &item.input())?;
    let y = cfg.label_convention.effective(item.label);
    let diff = t.sub(out.f_v, out.f_a);
    let sq = t.square(diff);
    let d2 = t.sum(sq);
    let d = t.sqrt(d2);
    let neg = t.scale(d, -1.0);
    let gap = t.add_scalar(neg, cfg.margin);
    let hinge = t.relu(gap);
    let hinge2 = t.square(hinge);
    let pull = t.scale(d2, 1.0 - y);
    let push = t.scale(hinge2, y);
    let l1 = t.add(pull, push);
    let target = item.label.as_f64();
    let l2 = t.bce_logit(out.z_v, target, cfg.prob_eps);
    let l3 = t.bce_logit(out.z_a, target, cfg.prob_eps);
    let a = t.scale(l1, cfg.lambda1 * scale);
    let b = t.scale(l2, cfg.lambda2 * scale);
    let c = t.scale(l3, cfg.lambda3 * scale);
    let ab = t.add(a, b);
    let root = t.add(ab, c);
    let grads = if with_grad {
        t.backward(root)
    } else {
        Vec::new()
    };
    Ok(ItemResult {
        l1: t.scalar(l1),
        l2: t.scalar(l2),
        l3: t.scalar(l3),
        grads,
    })
}

fn run_batch(
    model: &Model,
    store: &ParamStore,
    items: &[&TrainItem],
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(BatchLoss, Vec<Vec<f64>>)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scale = 1.0 / items.len() as f64;
    let results: Vec<ItemResult> = items
        .par_iter()
        .map(|item| item_pass(model, store, item, cfg, scale, with_grad))
        .collect::<Result<_>>()?;
    let mut grads = if with_grad {
        store.zeros_like()
    } else {
        Vec::new()
    };
    let mut loss = BatchLoss::default();
    for r in results {
        loss.l1 += r.l1 * scale;
        loss.l2 += r.l2 * scale;
        loss.l3 += r.l3 * scale;
        for (id, g) in r.grads {
            grads[id.0].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    loss.total = total_loss(loss.l1, loss.l2, loss.l3, cfg);
    Ok((loss, grads))
}

/// Loss of `L = λ1 L1 + λ2 L2 + λ3 L3` over a batch, and its gradient for
/// every parameter.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    items: &[&TrainItem],
    cfg: &LossConfig,
) -> Result<(BatchLoss, Vec<Vec<f64>>)> {
    run_batch(model, store, items, cfg, true)
}

pub fn batch_loss(
    model: &Model,
    store: &ParamStore,
    items: &[&TrainItem],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    run_batch(model, store, items, cfg, false).map(|(l, _)| l)
}

/// Adam over shuffled mini-batches. On a non-finite loss the store is left
/// at the last finite state and `DivergedLoss` is returned.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    items: &[TrainItem],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    loss_cfg.validate()?;
    let mut adam = Adam::new(store, cfg.adam);
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = BatchLoss::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, grads) = batch_gradients(model, store, &batch, loss_cfg)?;
            if !loss.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::DivergedLoss {
                    epoch,
                    step: step + 1,
                    value: loss.total,
                });
            }
            let w = batch.len() as f64;
            sums.total += loss.total * w;
            sums.l1 += loss.l1 * w;
            sums.l2 += loss.l2 * w;
            sums.l3 += loss.l3 * w;
            adam.step(store, &grads);
        }
        let n = items.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: sums.total / n,
            l1: sums.l1 / n,
            l2: sums.l2 / n,
            l3: sums.l3 / n,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Per-segment distances `||f_v - f_a||`, computed in parallel.
pub fn segment_distances(
    model: &Model,
    store: &ParamStore,
    inputs: &[SegmentInput<'_>],
) -> Result<Vec<f64>> {
    inputs
        .par_iter()
        .map(|input| {
            let out = model.forward(store, input)?;
            Ok(super::segment_distance(&out.f_v, &out.f_a))
        })
        .collect()
}
