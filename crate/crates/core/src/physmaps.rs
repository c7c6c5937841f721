//! Occlusion-sensitivity physiological maps.
//!
//! A square patch is slid over the (resized) crops; for each placement the
//! estimator is re-run and the per-frame absolute difference to the
//! unoccluded waveform becomes that patch's importance. Gray maps occlude
//! all channels at once, color maps occlude each channel separately.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::container::{decode, encode, read_bytes, write_bytes};
use crate::ingest::CropSequence;
use crate::physio::{Estimator, PhysioResponse};

pub const MAP_MAGIC: [u8; 4] = *b"PMAP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Hr,
    Rr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    Gray,
    Color,
}

impl MapMode {
    pub fn channels(self) -> usize {
        match self {
            MapMode::Gray => 1,
            MapMode::Color => 3,
        }
    }
}

impl std::str::FromStr for Signal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hr" => Ok(Signal::Hr),
            "rr" => Ok(Signal::Rr),
            other => Err(Error::Config(format!("unknown signal {other:?}"))),
        }
    }
}

impl std::str::FromStr for MapMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gray" | "grey" => Ok(MapMode::Gray),
            "color" | "colour" => Ok(MapMode::Color),
            other => Err(Error::Config(format!("unknown map mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    pub patch: usize,
    pub stride: usize,
    pub fill: f32,
    pub mode: MapMode,
    pub signal: Signal,
    pub map_size: usize,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            patch: 9,
            stride: 9,
            fill: 0.0,
            mode: MapMode::Gray,
            signal: Signal::Hr,
            map_size: 36,
        }
    }
}

impl OcclusionConfig {
    pub fn new(signal: Signal, mode: MapMode) -> Self {
        Self {
            signal,
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch > self.map_size {
            return Err(Error::Config(format!(
                "patch {} must be in 1..={}",
                self.patch, self.map_size
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.stride == self.patch && !self.map_size.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "map_size {} must be divisible by stride {}",
                self.map_size, self.stride
            )));
        }
        if !(0.0..=1.0).contains(&self.fill) {
            return Err(Error::Config(format!("fill {} outside [0, 1]", self.fill)));
        }
        Ok(())
    }

    /// Top-left anchors of every patch placement, row-major.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let steps: Vec<usize> = (0..=self.map_size - self.patch)
            .step_by(self.stride)
            .collect();
        steps
            .iter()
            .flat_map(|&r| steps.iter().map(move |&c| (r, c)))
            .collect()
    }
}

/// Per-frame, per-placement, per-channel waveform differences before
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDifferences {
    /// `[T, P, C]`, all entries non-negative.
    pub deltas: Array3<f64>,
    pub positions: Vec<(usize, usize)>,
}

impl RawDifferences {
    pub fn max(&self) -> f64 {
        self.deltas.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysMap {
    /// `[T, map_size, map_size, C]` in [0, 1], min-max normalized per segment.
    pub values: Array4<f32>,
    pub signal: Signal,
    pub mode: MapMode,
    /// All-ones map emitted when every delta was (numerically) equal.
    pub degenerate: bool,
}

impl PhysMap {
    pub fn frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn size(&self) -> usize {
        self.values.dim().1
    }

    pub fn all_ones(t: usize, size: usize, signal: Signal, mode: MapMode) -> PhysMap {
        PhysMap {
            values: Array4::ones((t, size, size, mode.channels())),
            signal,
            mode,
            degenerate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

/// Copy of `crops` with the `patch`-sided window at `anchor` set to `fill` in
/// every frame, either in all channels or only in `channel`.
pub fn occlude(
    crops: &CropSequence,
    anchor: (usize, usize),
    patch: usize,
    channel: Option<usize>,
    fill: f32,
) -> Result<CropSequence> {
    if patch == 0 {
        return Err(Error::Invalid(
            "occlusion patch must be at least 1 pixel".into(),
        ));
    }
    if !(0.0..=1.0).contains(&fill) {
        return Err(Error::Invalid(format!("fill {fill} outside [0, 1]")));
    }
    if channel.is_some_and(|c| c > 2) {
        return Err(Error::Invalid(format!("channel {channel:?} out of range")));
    }
    let size = crops.size();
    let (row, col) = anchor;
    if row + patch > size || col + patch > size {
        return Err(Error::OutOfBounds {
            row,
            col,
            patch,
            height: size,
            width: size,
        });
    }
    let mut frames = crops.frames().clone();
    let t = frames.dim().0;
    for f in 0..t {
        for i in row..row + patch {
            for j in col..col + patch {
                match channel {
                    Some(c) => frames[[f, i, j, c]] = fill,
                    None => {
                        for c in 0..3 {
                            frames[[f, i, j, c]] = fill;
                        }
                    }
                }
            }
        }
    }
    CropSequence::new(frames, crops.fps())
}

fn selected(resp: &PhysioResponse, signal: Signal) -> &[f64] {
    match signal {
        Signal::Hr => &resp.pulse.samples,
        Signal::Rr => &resp.resp.samples,
    }
}

/// Steps 2 to 5 of the occlusion procedure without normalization.
pub fn raw_differences(
    crops: &CropSequence,
    cfg: &OcclusionConfig,
    est: &dyn Estimator,
    exec: Execution,
) -> Result<RawDifferences> {
    cfg.validate()?;
    let crops = crops.resized(cfg.map_size);
    let reference = est.estimate(&crops)?;
    let reference = selected(&reference, cfg.signal).to_vec();
    let positions = cfg.positions();
    let channels: Vec<Option<usize>> = match cfg.mode {
        MapMode::Gray => vec![None],
        MapMode::Color => vec![Some(0), Some(1), Some(2)],
    };
    let jobs: Vec<((usize, usize), Option<usize>)> = positions
        .iter()
        .flat_map(|&p| channels.iter().map(move |&c| (p, c)))
        .collect();
    let run = |&(anchor, channel): &((usize, usize), Option<usize>)| -> Result<Vec<f64>> {
        let occluded = occlude(&crops, anchor, cfg.patch, channel, cfg.fill)?;
        let resp = est.estimate(&occluded)?;
        let occ = selected(&resp, cfg.signal);
        if occ.len() != reference.len() {
            return Err(Error::ShapeMismatch(format!(
                "estimator returned {} samples for {} frames",
                occ.len(),
                reference.len()
            )));
        }
        Ok(reference
            .iter()
            .zip(occ)
            .map(|(a, b)| (a - b).abs())
            .collect())
    };
    let results: Vec<Vec<f64>> = match exec {
        Execution::Serial => jobs.iter().map(run).collect::<Result<_>>()?,
        Execution::Parallel => jobs.par_iter().map(run).collect::<Result<_>>()?,
    };
    let t = crops.len();
    let c = channels.len();
    let mut deltas = Array3::<f64>::zeros((t, positions.len(), c));
    for (k, series) in results.iter().enumerate() {
        let (p, ch) = (k / c, k % c);
        for (f, &d) in series.iter().enumerate() {
            deltas[[f, p, ch]] = d;
        }
    }
    Ok(RawDifferences { deltas, positions })
}

/// Min-max normalizes the deltas over the whole segment and paints every
/// patch window with its value, taking the maximum where windows overlap.
pub fn paint(raw: &RawDifferences, cfg: &OcclusionConfig) -> PhysMap {
    let (t, _, c) = raw.deltas.dim();
    let lo = raw.deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo >= 1e-12) {
        return PhysMap::all_ones(t, cfg.map_size, cfg.signal, cfg.mode);
    }
    let span = hi - lo;
    let mut values = Array4::<f32>::zeros((t, cfg.map_size, cfg.map_size, c));
    for f in 0..t {
        for (p, &(row, col)) in raw.positions.iter().enumerate() {
            for ch in 0..c {
                let v = ((raw.deltas[[f, p, ch]] - lo) / span) as f32;
                for i in row..row + cfg.patch {
                    for j in col..col + cfg.patch {
                        let cell = &mut values[[f, i, j, ch]];
                        if v > *cell {
                            *cell = v;
                        }
                    }
                }
            }
        }
    }
    PhysMap {
        values,
        signal: cfg.signal,
        mode: cfg.mode,
        degenerate: false,
    }
}

pub fn generate_maps(
    crops: &CropSequence,
    cfg: &OcclusionConfig,
    est: &dyn Estimator,
) -> Result<PhysMap> {
    generate_maps_with(crops, cfg, est, Execution::Parallel)
}

pub fn generate_maps_with(
    crops: &CropSequence,
    cfg: &OcclusionConfig,
    est: &dyn Estimator,
    exec: Execution,
) -> Result<PhysMap> {
    let raw = raw_differences(crops, cfg, est, exec)?;
    Ok(paint(&raw, cfg))
}

/// Temporal mean of a map, `[map_size, map_size, C]`.
pub fn segment_map(m: &PhysMap) -> Array3<f32> {
    let t = m.frames() as f64;
    m.values
        .map(|&v| v as f64)
        .sum_axis(Axis(0))
        .mapv(|s| ((s / t) as f32).clamp(0.0, 1.0))
}

/// `round(255 v)` with halves rounded up.
pub fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) as f64 + 0.5).floor() as u8
}

/// Writes an `[H, W, C]` image (C = 1 gray, C = 3 RGB) as an 8-bit PNG.
pub fn export_png(image: ArrayView3<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = image.dim();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        other => {
            return Err(Error::Invalid(format!(
                "PNG export needs 1 or 3 channels, got {other}"
            )))
        }
    };
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image.iter().map(|&v| quantize(v)).collect();
    let mut writer = encoder
        .write_header()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    writer
        .finish()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(())
}

pub fn encode_map(m: &PhysMap) -> Vec<u8> {
    let (t, h, w, c) = m.values.dim();
    let tags = [
        match m.signal {
            Signal::Hr => 0,
            Signal::Rr => 1,
        },
        match m.mode {
            MapMode::Gray => 0,
            MapMode::Color => 1,
        },
        m.degenerate as u8,
    ];
    let data: Vec<f32> = m.values.iter().copied().collect();
    encode(MAP_MAGIC, &tags, &[t, h, w, c], &data)
}

pub fn decode_map(bytes: &[u8]) -> Result<PhysMap> {
    let raw = decode(bytes, MAP_MAGIC, 3, 4)?;
    let bad = |what: &str, v: u8| Error::Invalid(format!("bad map {what} tag {v}"));
    let signal = match raw.tags[0] {
        0 => Signal::Hr,
        1 => Signal::Rr,
        v => return Err(bad("signal", v)),
    };
    let mode = match raw.tags[1] {
        0 => MapMode::Gray,
        1 => MapMode::Color,
        v => return Err(bad("mode", v)),
    };
    let degenerate = match raw.tags[2] {
        0 => false,
        1 => true,
        v => return Err(bad("degenerate", v)),
    };
    let shape = (raw.dims[0], raw.dims[1], raw.dims[2], raw.dims[3]);
    if shape.3 != mode.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{mode:?} map with {} channels",
            shape.3
        )));
    }
    let values = Array4::from_shape_vec(shape, raw.payload)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(PhysMap {
        values,
        signal,
        mode,
        degenerate,
    })
}

pub fn write_map(path: impl AsRef<Path>, m: &PhysMap) -> Result<()> {
    write_bytes(path.as_ref(), &encode_map(m))
}

pub fn read_map(path: impl AsRef<Path>) -> Result<PhysMap> {
    decode_map(&read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physio::EstimatorConfig;

    fn constant(t: usize) -> CropSequence {
        CropSequence::new(Array4::from_elem((t, 36, 36, 3), 0.4), 30.0).unwrap()
    }

    #[test]
    fn sixteen_positions_for_default_tiling() {
        let cfg = OcclusionConfig::default();
        let pos = cfg.positions();
        assert_eq!(pos.len(), 16);
        assert_eq!(pos[1], (0, 9));
        assert_eq!(pos[15], (27, 27));
        let overlapping = OcclusionConfig {
            stride: 3,
            ..OcclusionConfig::default()
        };
        assert_eq!(overlapping.positions().len(), 100);
    }

    #[test]
    fn full_occlusion_blacks_out() {
        let c = constant(2);
        let out = occlude(&c, (0, 0), 36, None, 0.0).unwrap();
        assert!(out.frames().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occlusion_is_idempotent() {
        let c = constant(2);
        let once = occlude(&c, (3, 5), 9, Some(1), 0.2).unwrap();
        let twice = occlude(&once, (3, 5), 9, Some(1), 0.2).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.frames()[[0, 3, 5, 0]], 0.4);
        assert_eq!(once.frames()[[0, 3, 5, 1]], 0.2);
    }

    #[test]
    fn occlusion_errors() {
        let c = constant(1);
        assert!(matches!(
            occlude(&c, (30, 0), 9, None, 0.0),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(occlude(&c, (0, 0), 0, None, 0.0).is_err());
    }

    #[test]
    fn constant_crops_make_degenerate_all_ones() {
        let est = EstimatorConfig::default();
        for mode in [MapMode::Gray, MapMode::Color] {
            let m = generate_maps(&constant(30), &OcclusionConfig::new(Signal::Hr, mode), &est)
                .unwrap();
            assert!(m.degenerate);
            assert_eq!(m.values.dim(), (30, 36, 36, mode.channels()));
            assert!(m.values.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn segment_map_means() {
        let ones = PhysMap::all_ones(3, 4, Signal::Hr, MapMode::Gray);
        assert!(segment_map(&ones).iter().all(|&v| v == 1.0));
        let mut alt = ones.clone();
        alt.values.index_axis_mut(Axis(0), 0).fill(0.0);
        alt.values = alt.values.slice(ndarray::s![0..2, .., .., ..]).to_owned();
        assert!(segment_map(&alt).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
    }

    #[test]
    fn png_export_gray_and_color() {
        let dir = tempfile::tempdir().unwrap();
        let gray = Array3::<f32>::zeros((4, 4, 1));
        export_png(gray.view(), dir.path().join("g.png")).unwrap();
        let color = Array3::<f32>::ones((4, 4, 3));
        export_png(color.view(), dir.path().join("c.png")).unwrap();

        let decoder = png::Decoder::new(std::io::BufReader::new(
            File::open(dir.path().join("g.png")).unwrap(),
        ));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!(info.color_type, png::ColorType::Grayscale);
        assert!(buf[..info.buffer_size()].iter().all(|&b| b == 0));

        let decoder = png::Decoder::new(std::io::BufReader::new(
            File::open(dir.path().join("c.png")).unwrap(),
        ));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!(info.color_type, png::ColorType::Rgb);
        assert!(buf[..info.buffer_size()].iter().all(|&b| b == 255));
    }

    #[test]
    fn map_container_round_trip() {
        let m = PhysMap {
            values: Array4::from_shape_fn((2, 4, 4, 3), |(a, b, c, d)| {
                ((a + b + c + d) % 7) as f32 / 7.0
            }),
            signal: Signal::Rr,
            mode: MapMode::Color,
            degenerate: false,
        };
        let bytes = encode_map(&m);
        assert_eq!(&bytes[..7], &[b'P', b'M', b'A', b'P', 1, 1, 0]);
        assert_eq!(decode_map(&bytes).unwrap(), m);
        assert!(matches!(
            decode_map(&bytes[..bytes.len() - 1]),
            Err(Error::HeaderPayloadSizeMismatch { .. })
        ));
    }
}
