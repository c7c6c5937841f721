//! Python bindings for the physmap library.

use ndarray::{Array2, Array4};
use numpy::{
    IntoPyArray, PyArray1, PyArray2, PyArray4, PyReadonlyArray1, PyReadonlyArray2, PyReadonlyArray4,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use physmap::config::{parse_map_choice, PipelineConfig};
use physmap::dissonance::{self, Checkpoint as CoreCheckpoint, LabelConvention, LossConfig};
use physmap::fusion::{self, Activation, GcnParams, NodeFeatures};
use physmap::ingest::{load_manifest, CropSequence, Label};
use physmap::physio::{EstimatorConfig, Waveform};
use physmap::physmaps::{MapMode, OcclusionConfig, PhysMap, Signal};
use physmap::{audio, augment, metrics, physio, physmaps, pipeline, synth};

create_exception!(physmap_py, PhysmapError, PyException);

fn err(e: physmap::Error) -> PyErr {
    PhysmapError::new_err(format!("{e} (exit code {})", e.exit_code()))
}

fn crops(array: PyReadonlyArray4<'_, f32>, fps: f64) -> PyResult<CropSequence> {
    CropSequence::new(array.as_array().to_owned(), fps).map_err(err)
}

fn labels(raw: &[u8]) -> PyResult<Vec<Label>> {
    raw.iter()
        .map(|&b| {
            Label::from_bit(b)
                .ok_or_else(|| PhysmapError::new_err(format!("label {b} is not 0 or 1")))
        })
        .collect()
}

type WaveformPair<'py> = (Bound<'py, PyArray1<f64>>, Bound<'py, PyArray1<f64>>);

/// Pulse and respiration waveforms of a `[T, H, W, 3]` crop stack.
#[pyfunction]
#[pyo3(signature = (crops_array, fps, method = "green_mean"))]
fn estimate_waveforms<'py>(
    py: Python<'py>,
    crops_array: PyReadonlyArray4<'py, f32>,
    fps: f64,
    method: &str,
) -> PyResult<WaveformPair<'py>> {
    let cfg = EstimatorConfig::with_method(method.parse().map_err(err)?);
    let r = physio::estimate_waveforms(&crops(crops_array, fps)?, &cfg).map_err(err)?;
    Ok((
        r.pulse.samples.into_pyarray(py),
        r.resp.samples.into_pyarray(py),
    ))
}

/// Frequency of the largest spectral peak inside `[low, high]` Hz.
#[pyfunction]
fn dominant_frequency(samples: Vec<f64>, fps: f64, low: f64, high: f64) -> PyResult<f64> {
    physio::dominant_frequency(&Waveform { samples, fps }, (low, high))
        .map(|p| p.frequency)
        .map_err(err)
}

/// Per-frame occlusion maps, `[T, S, S, C]` with C = 1 (gray) or 3 (color).
#[pyfunction]
#[pyo3(signature = (crops_array, fps, map = "hr-gray", method = "green_mean"))]
fn generate_maps<'py>(
    py: Python<'py>,
    crops_array: PyReadonlyArray4<'py, f32>,
    fps: f64,
    map: &str,
    method: &str,
) -> PyResult<Bound<'py, PyArray4<f32>>> {
    let (signal, mode) = parse_map_choice(map).map_err(err)?;
    let est = EstimatorConfig::with_method(method.parse().map_err(err)?);
    let seq = crops(crops_array, fps)?;
    let m = py
        .detach(|| physmaps::generate_maps(&seq, &OcclusionConfig::new(signal, mode), &est))
        .map_err(err)?;
    Ok(m.values.into_pyarray(py))
}

/// Multiplies crops by a map; the map's channel count selects gray or color.
#[pyfunction]
fn apply_map<'py>(
    py: Python<'py>,
    crops_array: PyReadonlyArray4<'py, f32>,
    fps: f64,
    map: PyReadonlyArray4<'py, f32>,
) -> PyResult<Bound<'py, PyArray4<f32>>> {
    let values: Array4<f32> = map.as_array().to_owned();
    let mode = if values.dim().3 == 1 {
        MapMode::Gray
    } else {
        MapMode::Color
    };
    let m = PhysMap {
        values,
        signal: Signal::Hr,
        mode,
        degenerate: false,
    };
    let out = augment::apply_map(&crops(crops_array, fps)?, &m).map_err(err)?;
    Ok(out.crops.into_frames().into_pyarray(py))
}

/// Cosine similarity clamped to `[0, 1]`.
#[pyfunction]
fn edge_weight(x1: Vec<f64>, x2: Vec<f64>) -> PyResult<f64> {
    if x1.len() != x2.len() {
        return Err(PhysmapError::new_err("vectors differ in length"));
    }
    Ok(fusion::edge_weight(&x1, &x2))
}

/// Bipartite adjacency for `[2T, d]` node features (maps first).
#[pyfunction]
fn build_graph<'py>(
    py: Python<'py>,
    features: PyReadonlyArray2<'py, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let nf = NodeFeatures::new(features.as_array().to_owned()).map_err(err)?;
    Ok(fusion::build_graph(&nf).adjacency.into_pyarray(py))
}

/// One GCN layer over the bipartite graph of `features`.
#[pyfunction]
#[pyo3(signature = (features, weight, relu = true))]
fn gcn_forward<'py>(
    py: Python<'py>,
    features: PyReadonlyArray2<'py, f64>,
    weight: PyReadonlyArray2<'py, f64>,
    relu: bool,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let nf = NodeFeatures::new(features.as_array().to_owned()).map_err(err)?;
    let p = GcnParams {
        weight: weight.as_array().to_owned(),
        activation: if relu {
            Activation::Relu
        } else {
            Activation::Identity
        },
    };
    let out: Array2<f64> = fusion::gcn_forward(&fusion::build_graph(&nf), &nf, &p).map_err(err)?;
    Ok(out.into_pyarray(py))
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, label_bits: Vec<u8>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels(&label_bits)?).map_err(err)
}

#[pyfunction]
fn mds(distances: Vec<f64>) -> PyResult<f64> {
    dissonance::mds(&distances).map_err(err)
}

#[pyfunction]
fn select_threshold(values: Vec<f64>, label_bits: Vec<u8>) -> PyResult<f64> {
    dissonance::select_threshold(&values, &labels(&label_bits)?, LabelConvention::Semantic)
        .map_err(err)
}

/// 1 (fake) iff `mds_value >= tau`.
#[pyfunction]
fn classify(mds_value: f64, tau: f64) -> u8 {
    dissonance::classify(mds_value, tau, LabelConvention::Semantic).into()
}

#[pyfunction]
#[pyo3(signature = (distances, label_bits, margin = 0.99))]
fn contrastive_loss(distances: Vec<f64>, label_bits: Vec<u8>, margin: f64) -> PyResult<f64> {
    let cfg = LossConfig {
        margin,
        ..LossConfig::default()
    };
    dissonance::contrastive_loss(&distances, &labels(&label_bits)?, &cfg).map_err(err)
}

#[pyfunction]
fn cross_entropy(y_hat: f64, label_bit: u8) -> PyResult<f64> {
    Ok(dissonance::cross_entropy(y_hat, labels(&[label_bit])?[0]))
}

/// `[frames, n_mels]` log-mel features of mono PCM.
#[pyfunction]
fn log_mel<'py>(
    py: Python<'py>,
    samples: PyReadonlyArray1<'py, f32>,
    sample_rate: u32,
) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let s = samples.as_array().to_vec();
    Ok(
        audio::log_mel(&s, sample_rate, &audio::MelConfig::default())
            .map_err(err)?
            .into_pyarray(py),
    )
}

/// One synthetic sample as a dict with `crops`, `audio_features`, `mask`
/// and `label`.
#[pyfunction]
#[pyo3(signature = (seed, coherent = true))]
fn synth_sample(py: Python<'_>, seed: u64, coherent: bool) -> PyResult<Py<PyAny>> {
    let spec = synth::SynthSpec {
        seed,
        coherence: if coherent {
            synth::Coherence::Coherent
        } else {
            synth::Coherence::Decorrelated
        },
        ..Default::default()
    };
    let s = synth::generate_sample(&spec).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("crops", s.crops.into_frames().into_pyarray(py))?;
    d.set_item("audio_features", s.audio_features.into_pyarray(py))?;
    d.set_item("mask", s.mask.into_pyarray(py))?;
    d.set_item("label", u8::from(s.label))?;
    Ok(d.into_any().unbind())
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_real, n_fake, seed = 0))]
fn synth_dataset(out_dir: &str, n_real: usize, n_fake: usize, seed: u64) -> PyResult<String> {
    synth::generate_dataset(&synth::SynthSpec::default(), n_real, n_fake, seed, out_dir)
        .map(|p| p.display().to_string())
        .map_err(err)
}

/// Trains on a manifest; `config` is optional TOML text.
#[pyfunction]
#[pyo3(signature = (manifest, mode = "plain", map = "hr-gray", epochs = None, seed = 0, config = None))]
fn train(
    py: Python<'_>,
    manifest: &str,
    mode: &str,
    map: &str,
    epochs: Option<usize>,
    seed: u64,
    config: Option<&str>,
) -> PyResult<Checkpoint> {
    let mut cfg = match config {
        Some(text) => PipelineConfig::from_toml_str(text).map_err(err)?,
        None => PipelineConfig::default(),
    };
    cfg.mode = mode.parse().map_err(err)?;
    let (signal, map_mode) = parse_map_choice(map).map_err(err)?;
    cfg.set_map_choice(signal, map_mode);
    cfg.seed = seed;
    if let Some(e) = epochs {
        cfg.dissonance.epochs = e;
    }
    let manifest = manifest.to_string();
    let outcome = py
        .detach(move || {
            cfg.validate()?;
            let records = load_manifest(&manifest)?;
            let videos = pipeline::prepare_records(&records, &cfg)?;
            pipeline::train_videos(&videos, &cfg, |_| {})
        })
        .map_err(err)?;
    Ok(Checkpoint {
        inner: outcome.checkpoint,
    })
}

/// Trained model, threshold and configuration echo.
#[pyclass(module = "physmap_py")]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: dissonance::read_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        dissonance::write_checkpoint(path, &self.inner).map_err(err)
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.header.tau
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.header.seed
    }

    #[getter]
    fn mode(&self) -> String {
        serde_json::to_value(self.inner.header.model.mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    /// Scores a manifest; returns the report as a dict.
    fn evaluate(&self, py: Python<'_>, manifest: &str) -> PyResult<Py<PyAny>> {
        let manifest = manifest.to_string();
        let ckpt = &self.inner;
        let report = py
            .detach(|| {
                let records = load_manifest(&manifest)?;
                pipeline::evaluate_records(ckpt, &records)?.to_json()
            })
            .map_err(err)?;
        Ok(py
            .import("json")?
            .call_method1("loads", (report,))?
            .unbind())
    }
}

#[pymodule]
fn physmap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PhysmapError", m.py().get_type::<PhysmapError>())?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(estimate_waveforms, m)?)?;
    m.add_function(wrap_pyfunction!(dominant_frequency, m)?)?;
    m.add_function(wrap_pyfunction!(generate_maps, m)?)?;
    m.add_function(wrap_pyfunction!(apply_map, m)?)?;
    m.add_function(wrap_pyfunction!(edge_weight, m)?)?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(gcn_forward, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(mds, m)?)?;
    m.add_function(wrap_pyfunction!(select_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
