use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Init;
use crate::autodiff::{seeded_rng, sigmoid, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{
    gcn_tape, node_images, normalized_adjacency_const, normalized_adjacency_tape,
    select_nodes_tape, ConcatMode, EncoderConfig,
};
use crate::ingest::CropSequence;
use crate::nn::{ConvStack, ImageEncoder, Linear};
use crate::physmaps::PhysMap;

/// `Augmented` feeds map-multiplied crops to the same network as `Plain`;
/// `Gcn` adds the graph fusion branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Plain,
    Augmented,
    Gcn,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Mode::Plain),
            "augmented" => Ok(Mode::Augmented),
            "gcn" => Ok(Mode::Gcn),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub embed_dim: usize,
    /// Per-frame CNN channels, starting with the 3 input channels.
    pub video_channels: Vec<usize>,
    /// Temporal CNN channels of the audio stream, after the feature dim.
    pub audio_channels: Vec<usize>,
    /// Feature columns per audio row (mel bands for raw audio).
    pub audio_dim: usize,
    /// Frames per segment; fixes the fusion projection width.
    pub frames: usize,
    /// Frames are centred over the segment and multiplied by this.
    pub input_gain: f64,
    pub gcn_out: usize,
    pub concat: ConcatMode,
    pub adjacency_grad: bool,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Plain,
            embed_dim: 512,
            video_channels: vec![3, 8, 16, 32],
            audio_channels: vec![32, 32],
            audio_dim: 64,
            frames: 30,
            input_gain: 10.0,
            gcn_out: 16,
            concat: ConcatMode::Crops,
            adjacency_grad: false,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim == 0 || self.audio_dim == 0 || self.frames == 0 || self.gcn_out == 0 {
            return bad("model dimensions must be positive");
        }
        if self.video_channels.len() < 2 || self.video_channels[0] != 3 {
            return bad("video_channels must start with 3 and have at least one layer");
        }
        if self.audio_channels.is_empty() {
            return bad("audio_channels needs at least one layer");
        }
        if self.mode == Mode::Gcn {
            if self.encoder.channels.first() != Some(&3) || self.encoder.channels.len() < 2 {
                return bad("encoder channels must start with 3");
            }
            if self.encoder.output_dim == 0 {
                return bad("encoder output_dim must be positive");
            }
        }
        if !self.input_gain.is_finite() || self.input_gain <= 0.0 {
            return bad("input_gain must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GcnBranch {
    encoder: ImageEncoder,
    weight: ParamId,
    fuse: Linear,
}

/// Parameter layout of the bi-stream model; values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    video: ConvStack,
    video_proj: Linear,
    audio: ConvStack,
    audio_proj: Linear,
    head_v: Linear,
    head_a: Linear,
    gcn: Option<GcnBranch>,
}

/// One segment as the model sees it.
#[derive(Debug, Clone, Copy)]
pub struct SegmentInput<'a> {
    pub crops: &'a CropSequence,
    pub maps: Option<&'a PhysMap>,
    /// `[rows, audio_dim]` features.
    pub audio: &'a Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutputs {
    pub f_v: Vec<f64>,
    pub f_a: Vec<f64>,
    pub y_hat_v: f64,
    pub y_hat_a: f64,
}

pub(crate) struct TapeOutputs {
    pub f_v: Var,
    pub f_a: Var,
    pub z_v: Var,
    pub z_a: Var,
}

impl Model {
    /// Builds the layout and a freshly initialized store.
    pub fn new(cfg: ModelConfig) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(cfg.seed);
        let video_strides = vec![2; cfg.video_channels.len() - 1];
        let video = ConvStack::new(
            &mut store,
            &mut rng,
            "video",
            &cfg.video_channels,
            (3, 3),
            &video_strides,
        );
        let video_proj = Linear::new(
            &mut store,
            &mut rng,
            "video.proj",
            video.out_channels,
            cfg.embed_dim,
        );
        let mut audio_channels = vec![cfg.audio_dim];
        audio_channels.extend(&cfg.audio_channels);
        let audio_strides = vec![1; cfg.audio_channels.len()];
        let audio = ConvStack::new(
            &mut store,
            &mut rng,
            "audio",
            &audio_channels,
            (3, 1),
            &audio_strides,
        );
        let audio_proj = Linear::new(
            &mut store,
            &mut rng,
            "audio.proj",
            audio.out_channels,
            cfg.embed_dim,
        );
        let head_v = Linear::new(&mut store, &mut rng, "head_v", cfg.embed_dim, 1);
        let head_a = Linear::new(&mut store, &mut rng, "head_a", cfg.embed_dim, 1);
        let gcn = if cfg.mode == Mode::Gcn {
            let encoder = cfg.encoder.build(&mut store, "node_encoder");
            let weight = store.add(
                "gcn.weight",
                &[cfg.encoder.output_dim, cfg.gcn_out],
                Init::Scaled {
                    fan_in: cfg.encoder.output_dim,
                    gain: 2.0,
                },
                &mut rng,
            );
            let width = cfg.embed_dim + cfg.concat.width(cfg.frames, cfg.gcn_out);
            let fuse = Linear::new(&mut store, &mut rng, "fuse", width, cfg.embed_dim);
            Some(GcnBranch {
                encoder,
                weight,
                fuse,
            })
        } else {
            None
        };
        let model = Model {
            cfg,
            video,
            video_proj,
            audio,
            audio_proj,
            head_v,
            head_a,
            gcn,
        };
        Ok((model, store))
    }

    /// Rebuilds the layout for `cfg` and checks that `store` matches it.
    pub fn with_store(cfg: ModelConfig, store: &ParamStore) -> Result<Model> {
        let (model, fresh) = Model::new(cfg)?;
        if fresh.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} tensors, store has {}",
                fresh.len(),
                store.len()
            )));
        }
        for (a, b) in fresh.entries().iter().zip(store.entries()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn video_tensor(&self, crops: &CropSequence) -> (Vec<f64>, [usize; 4]) {
        let (t, h, w, c) = crops.frames().dim();
        let frames = crops.frames();
        let plane = h * w;
        let mut out = vec![0.0; t * c * plane];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mean = (0..t).map(|f| frames[[f, i, j, ch]] as f64).sum::<f64>() / t as f64;
                    for f in 0..t {
                        out[(f * c + ch) * plane + i * w + j] =
                            self.cfg.input_gain * (frames[[f, i, j, ch]] as f64 - mean);
                    }
                }
            }
        }
        (out, [t, c, h, w])
    }

    fn check_input(&self, input: &SegmentInput<'_>) -> Result<()> {
        if input.audio.ncols() != self.cfg.audio_dim {
            return Err(Error::ShapeMismatch(format!(
                "audio features have {} columns, model expects {}",
                input.audio.ncols(),
                self.cfg.audio_dim
            )));
        }
        if input.audio.nrows() == 0 {
            return Err(Error::ShapeMismatch("empty audio segment".into()));
        }
        if self.gcn.is_some() {
            if input.maps.is_none() {
                return Err(Error::ShapeMismatch(
                    "gcn mode needs physiological maps".into(),
                ));
            }
            if input.crops.len() != self.cfg.frames {
                return Err(Error::ShapeMismatch(format!(
                    "segment has {} frames, model built for {}",
                    input.crops.len(),
                    self.cfg.frames
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn forward_tape<'a>(
        &self,
        t: &mut Tape<'a>,
        store: &'a ParamStore,
        input: &SegmentInput<'_>,
    ) -> Result<TapeOutputs> {
        self.check_input(input)?;
        let (video, shape) = self.video_tensor(input.crops);
        let x = t.constant(video, &shape);
        let pooled = self.video.forward(t, store, x);
        let pooled = t.mean_rows(pooled);
        let mut f_v = self.video_proj.forward(t, store, pooled);

        if let (Some(g), Some(maps)) = (&self.gcn, input.maps) {
            let (images, shape) = node_images(input.crops, maps)?;
            let images = t.constant(images, &shape);
            let h = g.encoder.forward(t, store, images);
            let adj = if self.cfg.adjacency_grad {
                normalized_adjacency_tape(t, h)
            } else {
                normalized_adjacency_const(t, h)?
            };
            let w = t.param(store, g.weight);
            let emb = gcn_tape(t, adj, h, w);
            let nodes = select_nodes_tape(t, emb, self.cfg.concat);
            let cat = t.concat(&[f_v, nodes]);
            f_v = g.fuse.forward(t, store, cat);
        }

        let (rows, cols) = input.audio.dim();
        let mut audio = vec![0.0; rows * cols];
        for (r, row) in input.audio.rows().into_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                audio[c * rows + r] = v as f64;
            }
        }
        let a = t.constant(audio, &[1, cols, rows, 1]);
        let pooled = self.audio.forward(t, store, a);
        let f_a = self.audio_proj.forward(t, store, pooled);

        let z_v = self.head_v.forward(t, store, f_v);
        let z_a = self.head_a.forward(t, store, f_a);
        let flat = |t: &mut Tape<'a>, v: Var| {
            let n = t.value(v).len();
            t.reshape(v, &[n])
        };
        let f_v = flat(t, f_v);
        let f_a = flat(t, f_a);
        let z_v = flat(t, z_v);
        let z_a = flat(t, z_a);
        for v in [f_v, f_a, z_v, z_a] {
            if t.value(v).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteActivation("model output".into()));
            }
        }
        Ok(TapeOutputs { f_v, f_a, z_v, z_a })
    }

    pub fn forward(&self, store: &ParamStore, input: &SegmentInput<'_>) -> Result<StreamOutputs> {
        let mut t = Tape::new();
        let out = self.forward_tape(&mut t, store, input)?;
        let prob = |z: f64| sigmoid(z).clamp(1e-7, 1.0 - 1e-7);
        Ok(StreamOutputs {
            f_v: t.value(out.f_v).to_vec(),
            f_a: t.value(out.f_a).to_vec(),
            y_hat_v: prob(t.scalar(out.z_v)),
            y_hat_a: prob(t.scalar(out.z_a)),
        })
    }
}
