//! Dataset manifests, aligned crop sequences, audio and segmentation.

pub mod container;
mod manifest;

use ndarray::{s, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{
    read_audio, read_crops, read_features, read_wav, write_crops, write_features, write_wav,
};
pub use manifest::{load_manifest, write_manifest, VideoRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Label::from_bit(v).ok_or_else(|| format!("label must be 0 or 1, got {v}"))
    }
}

/// Temporally ordered stack of aligned RGB face crops, `[T, H, W, 3]` in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CropSequence {
    frames: Array4<f32>,
    fps: f64,
}

impl CropSequence {
    pub fn new(frames: Array4<f32>, fps: f64) -> Result<Self> {
        let (t, h, w, c) = frames.dim();
        if t == 0 {
            return Err(Error::Invalid(
                "crop sequence needs at least one frame".into(),
            ));
        }
        if h != w {
            return Err(Error::Invalid(format!("crops must be square, got {h}x{w}")));
        }
        if c != 3 {
            return Err(Error::Invalid(format!(
                "crops must have 3 channels, got {c}"
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
        }
        if let Some(bad) = frames
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::Invalid(format!("crop value {bad} outside [0, 1]")));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f32> {
        self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Side length of the square crops.
    pub fn size(&self) -> usize {
        self.frames.dim().1
    }

    pub fn slice_frames(&self, start: usize, count: usize) -> Result<CropSequence> {
        if count == 0 || start + count > self.len() {
            return Err(Error::Invalid(format!(
                "frame range {start}..{} outside 0..{}",
                start + count,
                self.len()
            )));
        }
        Ok(CropSequence {
            frames: self
                .frames
                .slice(s![start..start + count, .., .., ..])
                .to_owned(),
            fps: self.fps,
        })
    }

    /// Bilinear resampling of every frame to `size` x `size`.
    pub fn resized(&self, size: usize) -> CropSequence {
        if size == self.size() {
            return self.clone();
        }
        let (t, h, w, c) = self.frames.dim();
        let sy = h as f64 / size as f64;
        let sx = w as f64 / size as f64;
        let mut out = Array4::<f32>::zeros((t, size, size, c));
        for i in 0..size {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for j in 0..size {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                for f in 0..t {
                    for ch in 0..c {
                        let p = |y: usize, x: usize| self.frames[[f, y, x, ch]] as f64;
                        let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                        let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                        out[[f, i, j, ch]] = (top * (1.0 - wy) + bot * wy) as f32;
                    }
                }
            }
        }
        CropSequence {
            frames: out,
            fps: self.fps,
        }
    }
}

/// One segment's audio: raw mono PCM or a precomputed feature matrix.
/// For features, `sample_rate` counts feature rows per second.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioSegment {
    Samples {
        samples: Vec<f32>,
        sample_rate: u32,
    },
    Features {
        features: Array2<f32>,
        sample_rate: u32,
    },
}

impl AudioSegment {
    pub fn sample_rate(&self) -> u32 {
        match self {
            AudioSegment::Samples { sample_rate, .. }
            | AudioSegment::Features { sample_rate, .. } => *sample_rate,
        }
    }

    /// Number of samples (raw) or feature rows.
    pub fn len(&self) -> usize {
        match self {
            AudioSegment::Samples { samples, .. } => samples.len(),
            AudioSegment::Features { features, .. } => features.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate() as f64
    }

    fn slice(&self, start: usize, count: usize) -> AudioSegment {
        match self {
            AudioSegment::Samples {
                samples,
                sample_rate,
            } => AudioSegment::Samples {
                samples: samples[start..start + count].to_vec(),
                sample_rate: *sample_rate,
            },
            AudioSegment::Features {
                features,
                sample_rate,
            } => AudioSegment::Features {
                features: features.slice(s![start..start + count, ..]).to_owned(),
                sample_rate: *sample_rate,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video_id: String,
    /// 1-based position within the video.
    pub index: usize,
    pub crops: CropSequence,
    pub audio: AudioSegment,
    pub label: Label,
}

/// Reads a record's containers and cuts them into `duration`-second segments.
pub fn segment_video(record: &VideoRecord, duration: f64) -> Result<Vec<Segment>> {
    let crops =
        read_crops(&record.crops_path, record.fps).map_err(|e| corrupt(e, &record.crops_path))?;
    let audio = read_audio(&record.audio_path, record.sample_rate)
        .map_err(|e| corrupt(e, &record.audio_path))?;
    segment_streams(&record.id, record.label, &crops, &audio, duration)
}

fn corrupt(e: Error, path: &std::path::Path) -> Error {
    match e {
        Error::BadMagic { .. } | Error::HeaderPayloadSizeMismatch { .. } => {
            Error::CorruptContainer {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        }
        other => other,
    }
}

/// Frame and sample counts of one segment. The audio window follows the
/// video window's actual duration, `frames / fps`, so the two streams stay
/// aligned even when `duration * fps` is not a whole number.
pub fn segment_lengths(duration: f64, fps: f64, sample_rate: u32) -> (usize, usize) {
    let frames = (duration * fps).round() as usize;
    (frames, audio_offset(frames, fps, sample_rate))
}

fn audio_offset(frames: usize, fps: f64, sample_rate: u32) -> usize {
    (frames as f64 / fps * sample_rate as f64).round() as usize
}

/// In-memory segmentation. Trailing partial segments are dropped.
pub fn segment_streams(
    video_id: &str,
    label: Label,
    crops: &CropSequence,
    audio: &AudioSegment,
    duration: f64,
) -> Result<Vec<Segment>> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::Invalid(format!(
            "segment duration must be positive, got {duration}"
        )));
    }
    let fps = crops.fps();
    let rate = audio.sample_rate();
    let (n_frames, n_audio) = segment_lengths(duration, fps, rate);
    if n_frames == 0 || n_audio == 0 {
        return Err(Error::Invalid(format!(
            "segment of {duration} s holds no frames or audio samples"
        )));
    }
    let count = (0..crops.len() / n_frames)
        .take_while(|&k| audio_offset(k * n_frames, fps, rate) + n_audio <= audio.len())
        .count();
    (0..count)
        .map(|k| {
            Ok(Segment {
                video_id: video_id.to_string(),
                index: k + 1,
                crops: crops.slice_frames(k * n_frames, n_frames)?,
                audio: audio.slice(audio_offset(k * n_frames, fps, rate), n_audio),
                label,
            })
        })
        .collect()
}
