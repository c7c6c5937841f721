//! Pipeline configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::dissonance::{LabelConvention, LossConfig, Mode, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{ConcatMode, EncoderConfig, EncoderKind};
use crate::nn::AdamConfig;
use crate::physio::EstimatorConfig;
use crate::physmaps::{MapMode, OcclusionConfig, Signal};
use crate::synth::SynthSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Segment length D in seconds.
    pub segment_seconds: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            segment_seconds: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub encoder: EncoderKind,
    pub seed: u64,
    pub node_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub gcn_out: usize,
    pub concat: ConcatMode,
    /// Backpropagate through the cosine edge weights.
    pub adjacency_grad: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            encoder: enc.kind,
            seed: enc.seed,
            node_dim: enc.output_dim,
            encoder_channels: enc.channels,
            gcn_out: 16,
            concat: ConcatMode::Crops,
            adjacency_grad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DissonanceConfig {
    pub embed_dim: usize,
    pub video_channels: Vec<usize>,
    pub audio_channels: Vec<usize>,
    pub input_gain: f64,
    pub mel: MelConfig,
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub label_convention: LabelConvention,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for DissonanceConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let loss = LossConfig::default();
        let train = TrainConfig::default();
        Self {
            embed_dim: model.embed_dim,
            video_channels: model.video_channels,
            audio_channels: model.audio_channels,
            input_gain: model.input_gain,
            mel: MelConfig::default(),
            margin: loss.margin,
            lambda1: loss.lambda1,
            lambda2: loss.lambda2,
            lambda3: loss.lambda3,
            label_convention: loss.label_convention,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.adam.lr,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            eps: train.adam.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub auc_decimals: u32,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { auc_decimals: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_real: usize,
    pub n_fake: usize,
    pub sample: SynthSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_real: 100,
            n_fake: 100,
            sample: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: Mode,
    pub ingest: IngestConfig,
    pub physio: EstimatorConfig,
    /// Occlusion settings; `signal` and `mode` select the map variant used
    /// by the augmented and gcn modes.
    pub physmaps: OcclusionConfig,
    pub fusion: FusionConfig,
    pub dissonance: DissonanceConfig,
    pub metrics: MetricsConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Plain,
            ingest: IngestConfig::default(),
            physio: EstimatorConfig::default(),
            physmaps: OcclusionConfig::default(),
            fusion: FusionConfig::default(),
            dissonance: DissonanceConfig::default(),
            metrics: MetricsConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Parses `hr-gray`, `rrxcolor` and similar map selectors.
pub fn parse_map_choice(s: &str) -> Result<(Signal, MapMode)> {
    let lower = s.to_ascii_lowercase();
    let (sig, mode) = lower
        .split_once(['-', 'x', '_', ':'])
        .ok_or_else(|| Error::Config(format!("map selector {s:?} is not <hr|rr>-<gray|color>")))?;
    let signal = sig
        .parse()
        .map_err(|_| Error::Config(format!("unknown signal {sig:?}")))?;
    let mode = mode
        .parse()
        .map_err(|_| Error::Config(format!("unknown map mode {mode:?}")))?;
    Ok((signal, mode))
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if !(self.ingest.segment_seconds > 0.0) {
            return Err(Error::Config(
                "ingest.segment_seconds must be positive".into(),
            ));
        }
        self.physio.validate().map_err(cfg_err)?;
        self.physmaps.validate().map_err(cfg_err)?;
        self.synth.sample.validate().map_err(cfg_err)?;
        self.loss().validate()?;
        let d = &self.dissonance;
        if d.batch_size == 0 {
            return Err(Error::Config(
                "dissonance.batch_size must be positive".into(),
            ));
        }
        if !(d.lr > 0.0)
            || !(0.0..1.0).contains(&d.beta1)
            || !(0.0..1.0).contains(&d.beta2)
            || !(d.eps > 0.0)
        {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.mode == Mode::Gcn && self.fusion.encoder == EncoderKind::ExternalAdapter {
            return Err(Error::Config(
                "fusion.encoder = external_adapter is only available through the library API"
                    .into(),
            ));
        }
        self.model(1, 1).validate()
    }

    pub fn loss(&self) -> LossConfig {
        let d = &self.dissonance;
        LossConfig {
            margin: d.margin,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            lambda3: d.lambda3,
            label_convention: d.label_convention,
            ..LossConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        let d = &self.dissonance;
        TrainConfig {
            epochs: d.epochs,
            batch_size: d.batch_size,
            adam: AdamConfig {
                lr: d.lr,
                beta1: d.beta1,
                beta2: d.beta2,
                eps: d.eps,
            },
            seed: self.seed,
        }
    }

    /// Model layout for segments of `frames` frames and `audio_dim`
    /// audio feature columns.
    pub fn model(&self, frames: usize, audio_dim: usize) -> ModelConfig {
        let d = &self.dissonance;
        let f = &self.fusion;
        ModelConfig {
            mode: self.mode,
            embed_dim: d.embed_dim,
            video_channels: d.video_channels.clone(),
            audio_channels: d.audio_channels.clone(),
            audio_dim,
            frames,
            input_gain: d.input_gain,
            gcn_out: f.gcn_out,
            concat: f.concat,
            adjacency_grad: f.adjacency_grad,
            encoder: EncoderConfig {
                kind: f.encoder,
                seed: f.seed,
                output_dim: f.node_dim,
                channels: f.encoder_channels.clone(),
            },
            seed: self.seed,
        }
    }

    pub fn map_choice(&self) -> (Signal, MapMode) {
        (self.physmaps.signal, self.physmaps.mode)
    }

    pub fn set_map_choice(&mut self, signal: Signal, mode: MapMode) {
        self.physmaps.signal = signal;
        self.physmaps.mode = mode;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn paper_defaults() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.ingest.segment_seconds, 1.0);
        assert_eq!(cfg.dissonance.margin, 0.99);
        assert_eq!(cfg.dissonance.batch_size, 8);
        assert_eq!(cfg.dissonance.lr, 0.001);
        assert_eq!(cfg.physmaps.patch, 9);
        assert_eq!(cfg.physmaps.map_size, 36);
        assert_eq!((cfg.fusion.node_dim, cfg.fusion.gcn_out), (512, 16));
    }

    #[test]
    fn unknown_key_is_config_error() {
        assert!(matches!(
            PipelineConfig::from_toml_str("sed = 3"),
            Err(Error::Config(_))
        ));
        let cfg =
            PipelineConfig::from_toml_str("mode = \"gcn\"\n[dissonance]\nepochs = 3").unwrap();
        assert_eq!(cfg.mode, Mode::Gcn);
        assert_eq!(cfg.dissonance.epochs, 3);
    }

    #[test]
    fn map_selectors() {
        assert_eq!(
            parse_map_choice("hr-gray").unwrap(),
            (Signal::Hr, MapMode::Gray)
        );
        assert_eq!(
            parse_map_choice("RRxcolor").unwrap(),
            (Signal::Rr, MapMode::Color)
        );
        assert!(parse_map_choice("hr").is_err());
    }
}
