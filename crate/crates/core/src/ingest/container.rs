//! Little-endian float32 tensor containers.
//!
//! Every container is a 4-byte magic, an optional run of single-byte tags,
//! a list of `u32` dimensions and a frame-major `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4};

use super::{AudioSegment, CropSequence};
use crate::error::{Error, Result};

pub const CROPS_MAGIC: [u8; 4] = *b"FCS1";
pub const FEATURES_MAGIC: [u8; 4] = *b"AFM1";

/// Parsed view over a container file held in memory.
pub(crate) struct RawContainer {
    pub tags: Vec<u8>,
    pub dims: Vec<usize>,
    pub payload: Vec<f32>,
}

pub(crate) fn encode(magic: [u8; 4], tags: &[u8], dims: &[usize], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + tags.len() + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(tags);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode(
    bytes: &[u8],
    magic: [u8; 4],
    n_tags: usize,
    n_dims: usize,
) -> Result<RawContainer> {
    let header_len = 4 + n_tags + 4 * n_dims;
    if bytes.len() < 4 {
        return Err(Error::HeaderPayloadSizeMismatch {
            declared: header_len,
            actual: bytes.len(),
        });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::HeaderPayloadSizeMismatch {
            declared: header_len,
            actual: bytes.len(),
        });
    }
    let tags = bytes[4..4 + n_tags].to_vec();
    let dims: Vec<usize> = (0..n_dims)
        .map(|i| {
            let at = 4 + n_tags + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        })
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4));
    let declared = count.ok_or_else(|| Error::HeaderPayloadSizeMismatch {
        declared: usize::MAX,
        actual: bytes.len() - header_len,
    })?;
    let body = &bytes[header_len..];
    if body.len() != declared {
        return Err(Error::HeaderPayloadSizeMismatch {
            declared,
            actual: body.len(),
        });
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawContainer {
        tags,
        dims,
        payload,
    })
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn encode_crops(crops: &CropSequence) -> Vec<u8> {
    let frames = crops.frames();
    let (t, h, w, c) = frames.dim();
    let data: Vec<f32> = frames.iter().copied().collect();
    encode(CROPS_MAGIC, &[], &[t, h, w, c], &data)
}

/// Decodes an FCS1 container. The frame rate is not stored and must be
/// supplied by the caller (usually from the manifest).
pub fn decode_crops(bytes: &[u8], fps: f64) -> Result<CropSequence> {
    let raw = decode(bytes, CROPS_MAGIC, 0, 4)?;
    let shape = (raw.dims[0], raw.dims[1], raw.dims[2], raw.dims[3]);
    let frames = Array4::from_shape_vec(shape, raw.payload)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    CropSequence::new(frames, fps)
}

pub fn write_crops(path: impl AsRef<Path>, crops: &CropSequence) -> Result<()> {
    write_bytes(path.as_ref(), &encode_crops(crops))
}

pub fn read_crops(path: impl AsRef<Path>, fps: f64) -> Result<CropSequence> {
    let path = path.as_ref();
    decode_crops(&read_bytes(path)?, fps).map_err(|e| with_path(e, path))
}

pub fn write_features(path: impl AsRef<Path>, features: &Array2<f32>) -> Result<()> {
    let (ft, fd) = features.dim();
    let data: Vec<f32> = features.iter().copied().collect();
    write_bytes(
        path.as_ref(),
        &encode(FEATURES_MAGIC, &[], &[ft, fd], &data),
    )
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let raw = decode(&read_bytes(path)?, FEATURES_MAGIC, 0, 2).map_err(|e| with_path(e, path))?;
    Array2::from_shape_vec((raw.dims[0], raw.dims[1]), raw.payload)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Reads 16-bit PCM WAV, downmixing to mono, and returns samples in [-1, 1]
/// together with the header sample rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let corrupt = |reason: String| Error::CorruptContainer {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| corrupt(e.to_string()))?;
    let spec = reader.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(corrupt(format!(
            "expected PCM16, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| corrupt(e.to_string()))?;
    let samples = raw
        .chunks(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| s as f32 / 32768.0).sum();
            sum / frame.len() as f32
        })
        .collect();
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::CorruptContainer {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for &s in samples {
        // Same scale as read_wav, so PCM16 values survive a round trip.
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::CorruptContainer {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
    }
    writer.finalize().map_err(|e| Error::CorruptContainer {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(())
}

/// Loads whichever audio representation lives at `path`.
pub fn read_audio(path: impl AsRef<Path>, sample_rate: u32) -> Result<AudioSegment> {
    let path = path.as_ref();
    let is_wav = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("wav"))
        .unwrap_or(false);
    if is_wav {
        let (samples, header_rate) = read_wav(path)?;
        if header_rate != sample_rate {
            return Err(Error::FpsMismatch {
                manifest: sample_rate as f64,
                container: header_rate as f64,
            });
        }
        Ok(AudioSegment::Samples {
            samples,
            sample_rate,
        })
    } else {
        Ok(AudioSegment::Features {
            features: read_features(path)?,
            sample_rate,
        })
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::ShapeMismatch(reason) | Error::Invalid(reason) => Error::CorruptContainer {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}
