//! Labeled synthetic face-crop videos with known pulsatile regions.
//!
//! A latent envelope scales the pulse amplitude inside a rectangular region.
//! Audio features follow the same envelope for coherent (real) samples and an
//! independent envelope, orthogonalized against the visual one, for
//! decorrelated (fake) samples.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, container, AudioSegment, CropSequence, Label, VideoRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.row && i < self.row + self.height && j >= self.col && j < self.col + self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coherence {
    Coherent,
    Decorrelated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub total_frames: usize,
    pub fps: f64,
    pub size: usize,
    pub hr_freq: f64,
    pub rr_freq: f64,
    pub amplitude: f64,
    pub region: Rect,
    pub coherence: Coherence,
    pub seed: u64,
    /// Columns of the audio feature matrix; one row per video frame.
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Spacing of the envelope control points, seconds.
    pub envelope_knot: f64,
    /// When false, decorrelated samples carry no pulse in their crops.
    pub fake_pulse: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            total_frames: 150,
            fps: 30.0,
            size: 36,
            hr_freq: 1.2,
            rr_freq: 0.3,
            amplitude: 0.05,
            region: Rect {
                row: 18,
                col: 9,
                height: 9,
                width: 18,
            },
            coherence: Coherence::Coherent,
            seed: 0,
            feature_dim: 16,
            feature_noise: 0.02,
            envelope_knot: 0.5,
            fake_pulse: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let r = self.region;
        if r.height == 0
            || r.width == 0
            || r.row + r.height > self.size
            || r.col + r.width > self.size
        {
            return Err(Error::RegionOutOfBounds(format!(
                "{}x{} at ({}, {}) in {}px frame",
                r.height, r.width, r.row, r.col, self.size
            )));
        }
        if !(self.fps > 0.0) || self.hr_freq >= self.fps / 2.0 {
            return Err(Error::Invalid(format!(
                "hr_freq {} must be below Nyquist {}",
                self.hr_freq,
                self.fps / 2.0
            )));
        }
        if !(0.0..0.5).contains(&self.amplitude) {
            return Err(Error::Invalid(format!(
                "amplitude {} outside [0, 0.5)",
                self.amplitude
            )));
        }
        if self.total_frames == 0 || self.size == 0 || self.feature_dim == 0 {
            return Err(Error::Invalid(
                "frames, size and feature_dim must be positive".into(),
            ));
        }
        if !(self.envelope_knot > 0.0) {
            return Err(Error::Invalid("envelope_knot must be positive".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> Label {
        match self.coherence {
            Coherence::Coherent => Label::Real,
            Coherence::Decorrelated => Label::Fake,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub crops: CropSequence,
    /// `[total_frames, feature_dim]`, one row per frame.
    pub audio_features: Array2<f32>,
    /// `[size, size]`, true inside the pulsatile region.
    pub mask: Array2<bool>,
    pub label: Label,
    /// Ground-truth envelopes, one value per frame.
    pub pulse_envelope: Vec<f64>,
    pub audio_envelope: Vec<f64>,
}

impl SynthSample {
    pub fn audio(&self, fps: f64) -> AudioSegment {
        AudioSegment::Features {
            features: self.audio_features.clone(),
            sample_rate: fps.round() as u32,
        }
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for stream `k` of `seed`.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    splitmix(seed ^ splitmix(k.wrapping_add(0x5EED)))
}

fn envelope(rng: &mut ChaCha8Rng, frames: usize, fps: f64, knot: f64) -> Vec<f64> {
    let step = knot * fps;
    let n_knots = (frames as f64 / step).ceil() as usize + 2;
    let knots: Vec<f64> = (0..n_knots).map(|_| rng.random_range(0.3..1.7)).collect();
    (0..frames)
        .map(|t| {
            let x = t as f64 / step;
            let k = x.floor() as usize;
            let u = x - k as f64;
            let w = 0.5 - 0.5 * (PI * u).cos();
            knots[k] * (1.0 - w) + knots[k + 1] * w
        })
        .collect()
}

/// Removes from `other` its projection on `reference` (both centred), keeping
/// `other`'s mean and spread.
fn orthogonalize(other: &[f64], reference: &[f64]) -> Vec<f64> {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (mo, mr) = (mean(other), mean(reference));
    let o: Vec<f64> = other.iter().map(|v| v - mo).collect();
    let r: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let proj = if rr > 0.0 {
        o.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr
    } else {
        0.0
    };
    let resid: Vec<f64> = o.iter().zip(&r).map(|(a, b)| a - proj * b).collect();
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if norm(&resid) > 0.0 {
        norm(&o) / norm(&resid)
    } else {
        0.0
    };
    resid.iter().map(|v| (mo + scale * v).max(0.05)).collect()
}

/// Fixed spectral profile shared by every sample, unit norm.
fn audio_profile(dim: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim)
        .map(|k| (-(k as f64) / (dim as f64 / 3.0).max(1.0)).exp())
        .collect();
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| v / n).collect()
}

pub fn generate_sample(spec: &SynthSpec) -> Result<SynthSample> {
    spec.validate()?;
    let (t, size) = (spec.total_frames, spec.size);
    let mut tex_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0));
    let mut phase_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
    let mut env_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
    let mut alt_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 3));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 4));

    // static base frame: skin-toned ellipse on a dark background, plus texture
    let c = (size as f64 - 1.0) / 2.0;
    let (ay, ax) = (0.46 * size as f64, 0.38 * size as f64);
    let mut base = Array4::<f64>::zeros((1, size, size, 3));
    for i in 0..size {
        for j in 0..size {
            let d = ((i as f64 - c) / ay).powi(2) + ((j as f64 - c) / ax).powi(2);
            let tone = if d <= 1.0 {
                let shade = 1.0 - 0.25 * d;
                [0.78 * shade, 0.57 * shade, 0.45 * shade]
            } else {
                [0.12, 0.10, 0.10]
            };
            for ch in 0..3 {
                base[[0, i, j, ch]] = tone[ch] + tex_rng.random_range(-0.03..0.03);
            }
        }
    }

    let phase: f64 = phase_rng.random_range(0.0..2.0 * PI);
    let rr_phase: f64 = phase_rng.random_range(0.0..2.0 * PI);
    let pulse_env = envelope(&mut env_rng, t, spec.fps, spec.envelope_knot);
    let audio_env = match spec.coherence {
        Coherence::Coherent => pulse_env.clone(),
        Coherence::Decorrelated => {
            let other = envelope(&mut alt_rng, t, spec.fps, spec.envelope_knot);
            orthogonalize(&other, &pulse_env)
        }
    };
    let with_pulse = spec.coherence == Coherence::Coherent || spec.fake_pulse;

    let mask = Array2::from_shape_fn((size, size), |(i, j)| spec.region.contains(i, j));
    let frames = Array4::from_shape_fn((t, size, size, 3), |(f, i, j, ch)| {
        let time = f as f64 / spec.fps;
        let mut v = base[[0, i, j, ch]];
        v += spec.amplitude / 2.0 * (2.0 * PI * spec.rr_freq * time + rr_phase).sin();
        if with_pulse && ch == 1 && mask[[i, j]] {
            v += spec.amplitude * pulse_env[f] * (2.0 * PI * spec.hr_freq * time + phase).sin();
        }
        v.clamp(0.0, 1.0) as f32
    });

    let profile = audio_profile(spec.feature_dim);
    let noise =
        Normal::new(0.0, spec.feature_noise.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let audio_features = Array2::from_shape_fn((t, spec.feature_dim), |(f, k)| {
        (audio_env[f] * profile[k] + noise.sample(&mut noise_rng)) as f32
    });

    Ok(SynthSample {
        crops: CropSequence::new(frames, spec.fps)?,
        audio_features,
        mask,
        label: spec.label(),
        pulse_envelope: pulse_env,
        audio_envelope: audio_env,
    })
}

/// Sample specs for a dataset: `n_real` coherent then `n_fake` decorrelated,
/// with per-sample seeds derived from `seed`.
pub fn dataset_specs(
    template: &SynthSpec,
    n_real: usize,
    n_fake: usize,
    seed: u64,
) -> Result<Vec<(String, SynthSpec)>> {
    if n_real == 0 || n_fake == 0 {
        return Err(Error::Invalid(format!(
            "need at least one real and one fake sample, got {n_real}/{n_fake}"
        )));
    }
    let mut out = Vec::with_capacity(n_real + n_fake);
    for k in 0..n_real + n_fake {
        let (id, coherence) = if k < n_real {
            (format!("real_{k:04}"), Coherence::Coherent)
        } else {
            (format!("fake_{:04}", k - n_real), Coherence::Decorrelated)
        };
        out.push((
            id,
            SynthSpec {
                coherence,
                seed: derive_seed(seed, 1000 + k as u64),
                ..template.clone()
            },
        ));
    }
    Ok(out)
}

/// In-memory dataset, generated in parallel.
pub fn generate_samples(
    template: &SynthSpec,
    n_real: usize,
    n_fake: usize,
    seed: u64,
) -> Result<Vec<(String, SynthSample)>> {
    dataset_specs(template, n_real, n_fake, seed)?
        .into_par_iter()
        .map(|(id, spec)| Ok((id, generate_sample(&spec)?)))
        .collect()
}

/// Writes `crops/<id>.fcs`, `audio/<id>.afm` and `manifest.jsonl` under
/// `out_dir`, returning the manifest path.
pub fn generate_dataset(
    template: &SynthSpec,
    n_real: usize,
    n_fake: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let samples = generate_samples(template, n_real, n_fake, seed)?;
    std::fs::create_dir_all(out_dir.join("crops"))?;
    std::fs::create_dir_all(out_dir.join("audio"))?;
    let mut records = Vec::with_capacity(samples.len());
    for (id, sample) in &samples {
        let crops_rel = PathBuf::from("crops").join(format!("{id}.fcs"));
        let audio_rel = PathBuf::from("audio").join(format!("{id}.afm"));
        container::write_crops(out_dir.join(&crops_rel), &sample.crops)?;
        container::write_features(out_dir.join(&audio_rel), &sample.audio_features)?;
        records.push(VideoRecord {
            id: id.clone(),
            label: sample.label,
            crops_path: crops_rel,
            audio_path: audio_rel,
            fps: template.fps,
            sample_rate: template.fps.round() as u32,
        });
    }
    let manifest = out_dir.join("manifest.jsonl");
    ingest::write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physio::{estimate_waveforms, EstimatorConfig};

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn norms(f: &Array2<f32>) -> Vec<f64> {
        f.rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    #[test]
    fn same_seed_same_sample() {
        let spec = SynthSpec {
            seed: 11,
            ..SynthSpec::default()
        };
        assert_eq!(
            generate_sample(&spec).unwrap(),
            generate_sample(&spec).unwrap()
        );
    }

    #[test]
    fn audio_tracks_envelope_only_when_coherent() {
        for seed in 0..5 {
            let coherent = SynthSpec {
                seed,
                total_frames: 300,
                ..SynthSpec::default()
            };
            let fake = SynthSpec {
                coherence: Coherence::Decorrelated,
                ..coherent.clone()
            };
            let a = generate_sample(&coherent).unwrap();
            let b = generate_sample(&fake).unwrap();
            let ra = pearson(&norms(&a.audio_features), &a.pulse_envelope);
            let rb = pearson(&norms(&b.audio_features), &b.pulse_envelope);
            assert!(ra > 0.9, "seed {seed}: {ra}");
            assert!(rb.abs() < 0.2, "seed {seed}: {rb}");
            assert_eq!(a.label, Label::Real);
            assert_eq!(b.label, Label::Fake);
        }
    }

    #[test]
    fn zero_amplitude_is_static() {
        let spec = SynthSpec {
            amplitude: 0.0,
            total_frames: 30,
            ..SynthSpec::default()
        };
        let s = generate_sample(&spec).unwrap();
        let first = s.crops.frames().index_axis(ndarray::Axis(0), 0).to_owned();
        for frame in s.crops.frames().outer_iter() {
            assert_eq!(frame, first);
        }
        let r = estimate_waveforms(&s.crops, &EstimatorConfig::default()).unwrap();
        assert!(r.pulse.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn region_must_fit() {
        let spec = SynthSpec {
            region: Rect {
                row: 30,
                col: 0,
                height: 9,
                width: 9,
            },
            ..SynthSpec::default()
        };
        assert!(matches!(
            generate_sample(&spec),
            Err(Error::RegionOutOfBounds(_))
        ));
    }

    #[test]
    fn outside_mask_only_global_modulation() {
        let s = generate_sample(&SynthSpec {
            total_frames: 40,
            ..SynthSpec::default()
        })
        .unwrap();
        let f = s.crops.frames();
        // the difference between two outside pixels stays constant over time
        let d0 = f[[0, 2, 2, 1]] - f[[0, 5, 30, 1]];
        for t in 0..40 {
            assert!((f[[t, 2, 2, 1]] - f[[t, 5, 30, 1]] - d0).abs() < 1e-6);
        }
        assert_eq!(s.mask.iter().filter(|&&m| m).count(), 9 * 18);
    }

    #[test]
    fn dataset_needs_both_classes() {
        assert!(dataset_specs(&SynthSpec::default(), 5, 0, 1).is_err());
        let specs = dataset_specs(&SynthSpec::default(), 5, 5, 1).unwrap();
        assert_eq!(specs.len(), 10);
        assert_eq!(
            specs
                .iter()
                .filter(|(_, s)| s.label() == Label::Fake)
                .count(),
            5
        );
    }
}
