//! Log-mel front-end for raw PCM audio.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            window_ms: 25.0,
            hop_ms: 10.0,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters over `[0, sr/2]`, shape `[n_mels, n_fft/2 + 1]`.
fn filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((n_mels, bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    })
}

/// `[frames, n_mels]` natural-log mel energies. Short inputs are zero-padded
/// to one window.
pub fn log_mel(samples: &[f32], sample_rate: u32, cfg: &MelConfig) -> Result<Array2<f32>> {
    if sample_rate == 0 || cfg.n_mels == 0 || cfg.window_ms <= 0.0 || cfg.hop_ms <= 0.0 {
        return Err(Error::Invalid(format!(
            "bad mel configuration {cfg:?} at {sample_rate} Hz"
        )));
    }
    let win = ((cfg.window_ms / 1000.0 * sample_rate as f64).round() as usize).max(1);
    let hop = ((cfg.hop_ms / 1000.0 * sample_rate as f64).round() as usize).max(1);
    let n_fft = win.next_power_of_two();
    let frames = if samples.len() <= win {
        1
    } else {
        1 + (samples.len() - win) / hop
    };
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let bank = filterbank(cfg.n_mels, n_fft, sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut out = Array2::zeros((frames, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..win {
            let s = samples.get(f * hop + i).copied().unwrap_or(0.0) as f64;
            buf[i].re = s * hann[i];
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for m in 0..cfg.n_mels {
            let e: f64 = bank.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            out[[f, m]] = (e + 1e-10).ln() as f32;
        }
    }
    Ok(out)
}
