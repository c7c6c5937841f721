//! Dataset preparation, training and evaluation glue used by the CLI.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::log_mel;
use crate::augment::apply_map;
use crate::config::PipelineConfig;
use crate::dissonance::{
    self, mds, select_threshold, train, Checkpoint, EpochStats, MdsReport, Mode, Model,
    SegmentInput, TrainItem,
};
use crate::error::{Error, Result};
use crate::ingest::{segment_streams, segment_video, AudioSegment, Label, Segment, VideoRecord};
use crate::metrics::roc_auc;
use crate::physmaps::generate_maps;
use crate::synth::SynthSample;

/// Model-ready segments of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedVideo {
    pub id: String,
    pub label: Label,
    pub segments: Vec<TrainItem>,
}

fn audio_features(audio: &AudioSegment, cfg: &PipelineConfig) -> Result<Array2<f32>> {
    match audio {
        AudioSegment::Features { features, .. } => Ok(features.clone()),
        AudioSegment::Samples {
            samples,
            sample_rate,
        } => log_mel(samples, *sample_rate, &cfg.dissonance.mel),
    }
}

/// Turns raw segments into model inputs for `cfg.mode`: maps are generated
/// for the augmented and gcn modes, and augmented crops replace the
/// originals in augmented mode.
pub fn prepare_segments(
    id: &str,
    label: Label,
    segments: Vec<Segment>,
    cfg: &PipelineConfig,
) -> Result<PreparedVideo> {
    let items = segments
        .into_iter()
        .map(|seg| {
            let audio = audio_features(&seg.audio, cfg)?;
            let (crops, maps) = match cfg.mode {
                Mode::Plain => (seg.crops, None),
                Mode::Augmented => {
                    let m = generate_maps(&seg.crops, &cfg.physmaps, &cfg.physio)?;
                    (apply_map(&seg.crops, &m)?.crops, None)
                }
                Mode::Gcn => {
                    let m = generate_maps(&seg.crops, &cfg.physmaps, &cfg.physio)?;
                    (seg.crops, Some(m))
                }
            };
            Ok(TrainItem {
                crops,
                maps,
                audio,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::TooShort {
            frames: 0,
            window: 1,
        });
    }
    Ok(PreparedVideo {
        id: id.to_string(),
        label,
        segments: items,
    })
}

pub fn prepare_records(
    records: &[VideoRecord],
    cfg: &PipelineConfig,
) -> Result<Vec<PreparedVideo>> {
    records
        .par_iter()
        .map(|r| {
            let segments = segment_video(r, cfg.ingest.segment_seconds)?;
            prepare_segments(&r.id, r.label, segments, cfg)
        })
        .collect()
}

/// In-memory counterpart of [`prepare_records`] for synthetic samples.
pub fn prepare_samples(
    samples: &[(String, SynthSample)],
    cfg: &PipelineConfig,
) -> Result<Vec<PreparedVideo>> {
    samples
        .par_iter()
        .map(|(id, s)| {
            let audio = s.audio(s.crops.fps());
            let segments =
                segment_streams(id, s.label, &s.crops, &audio, cfg.ingest.segment_seconds)?;
            prepare_segments(id, s.label, segments, cfg)
        })
        .collect()
}

/// Stratified split by position within each class: even positions train,
/// odd positions test.
pub fn split_even_odd<T: Clone>(items: &[T], label: impl Fn(&T) -> Label) -> (Vec<T>, Vec<T>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let (mut n_real, mut n_fake) = (0usize, 0usize);
    for item in items {
        let k = match label(item) {
            Label::Real => {
                n_real += 1;
                n_real - 1
            }
            Label::Fake => {
                n_fake += 1;
                n_fake - 1
            }
        };
        if k % 2 == 0 {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    (train, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    pub train_mds: Vec<f64>,
}

/// Mean segment distance for each video.
pub fn video_mds(
    model: &Model,
    store: &crate::autodiff::ParamStore,
    videos: &[PreparedVideo],
) -> Result<Vec<f64>> {
    videos
        .iter()
        .map(|v| {
            let inputs: Vec<SegmentInput<'_>> = v.segments.iter().map(TrainItem::input).collect();
            mds(&dissonance::segment_distances(model, store, &inputs)?)
        })
        .collect()
}

/// Trains on `videos`, rounds parameters to f32 and picks the threshold on
/// the same videos.
pub fn train_videos(
    videos: &[PreparedVideo],
    cfg: &PipelineConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    let first = videos
        .first()
        .and_then(|v| v.segments.first())
        .ok_or(Error::EmptyDataset)?;
    let model_cfg = cfg.model(first.crops.len(), first.audio.ncols());
    let (model, mut store) = Model::new(model_cfg.clone())?;
    let items: Vec<TrainItem> = videos
        .iter()
        .flat_map(|v| v.segments.iter().cloned())
        .collect();
    let loss = cfg.loss();
    let history = train(
        &model,
        &mut store,
        &items,
        &loss,
        &cfg.train(),
        &mut on_epoch,
    )?;
    store.round_to_f32();
    let train_mds = video_mds(&model, &store, videos)?;
    let labels: Vec<Label> = videos.iter().map(|v| v.label).collect();
    let tau = select_threshold(&train_mds, &labels, loss.label_convention)?;
    let echo = serde_json::to_value(cfg)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model_cfg, loss, cfg.seed, tau, echo, store),
        history,
        train_mds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub id: String,
    pub mds: f64,
    pub label: Label,
    pub predicted: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_video: Vec<VideoScore>,
    pub tau: f64,
    pub auc: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// The configuration a checkpoint was trained with.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<PipelineConfig> {
    serde_json::from_value(ckpt.header.config.clone())
        .map_err(|e| Error::Config(format!("checkpoint configuration echo: {e}")))
}

/// Scores every video with the checkpoint's model and threshold. The AUC is
/// computed on the raw MDS, oriented so that higher means fake.
pub fn evaluate_videos(
    ckpt: &Checkpoint,
    videos: &[PreparedVideo],
    auc_decimals: u32,
) -> Result<EvalReport> {
    let model = Model::with_store(ckpt.header.model.clone(), &ckpt.store)?;
    let convention = ckpt.header.loss.label_convention;
    let tau = ckpt.header.tau;
    let scores = video_mds(&model, &ckpt.store, videos)?;
    let mut per_video = Vec::with_capacity(videos.len());
    for (v, &m) in videos.iter().zip(&scores) {
        let r = MdsReport::new(&v.id, vec![m], tau, convention)?;
        per_video.push(VideoScore {
            id: v.id.clone(),
            mds: m,
            label: v.label,
            predicted: r.predicted,
        });
    }
    let labels: Vec<Label> = videos.iter().map(|v| v.label).collect();
    let oriented: Vec<f64> = match convention {
        dissonance::LabelConvention::Semantic => scores.clone(),
        dissonance::LabelConvention::Verbatim => scores.iter().map(|s| -s).collect(),
    };
    let auc = roc_auc(&oriented, &labels)?;
    let scale = 10f64.powi(auc_decimals as i32);
    Ok(EvalReport {
        per_video,
        tau,
        auc: (auc * scale).round() / scale,
    })
}

/// Loads, prepares and scores the videos of a manifest.
pub fn evaluate_records(ckpt: &Checkpoint, records: &[VideoRecord]) -> Result<EvalReport> {
    let cfg = checkpoint_config(ckpt)?;
    let videos = prepare_records(records, &cfg)?;
    evaluate_videos(ckpt, &videos, cfg.metrics.auc_decimals)
}
