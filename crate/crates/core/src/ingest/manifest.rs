use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Label;
use crate::error::{Error, Result};

/// One manifest line. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub label: Label,
    pub crops_path: PathBuf,
    pub audio_path: PathBuf,
    pub fps: f64,
    pub sample_rate: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    label: serde_json::Value,
    crops_path: PathBuf,
    audio_path: PathBuf,
    fps: f64,
    sample_rate: u32,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<VideoRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        let label = parse_label(&raw.label, line_no)?;
        let malformed = |reason: String| Error::MalformedRecord {
            line: line_no,
            reason,
        };
        if raw.id.is_empty() {
            return Err(malformed("empty id".into()));
        }
        if !(raw.fps.is_finite() && raw.fps > 0.0) {
            return Err(malformed(format!("fps must be positive, got {}", raw.fps)));
        }
        if raw.sample_rate == 0 {
            return Err(malformed("sample_rate must be positive".into()));
        }
        let crops_path = base.join(&raw.crops_path);
        let audio_path = base.join(&raw.audio_path);
        for p in [&crops_path, &audio_path] {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        records.push(VideoRecord {
            id: raw.id,
            label,
            crops_path,
            audio_path,
            fps: raw.fps,
            sample_rate: raw.sample_rate,
        });
    }
    Ok(records)
}

/// Integer labels outside {0, 1} are malformed records; string labels other
/// than "real"/"fake" are unknown labels.
fn parse_label(value: &serde_json::Value, line: usize) -> Result<Label> {
    match value {
        serde_json::Value::Number(n) => n
            .as_u64()
            .and_then(|v| u8::try_from(v).ok())
            .and_then(Label::from_bit)
            .ok_or_else(|| Error::MalformedRecord {
                line,
                reason: format!("label must be 0 or 1, got {n}"),
            }),
        serde_json::Value::String(s) => match s.as_str() {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            _ => Err(Error::UnknownLabel { line, label: -1 }),
        },
        other => Err(Error::MalformedRecord {
            line,
            reason: format!("label must be an integer, got {other}"),
        }),
    }
}

/// Writes records as JSON lines. Paths are written as given.
pub fn write_manifest(path: impl AsRef<Path>, records: &[VideoRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}
