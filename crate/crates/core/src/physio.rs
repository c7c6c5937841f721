//! Pulse and respiration waveform estimation from aligned face crops.
//!
//! The built-in estimators work on per-frame spatial channel means:
//! `green_mean` (green channel only), CHROM and POS. Every estimator output
//! is detrended with a centered moving average, band-limited with a DFT mask
//! and finally mean-centred.

use std::cell::RefCell;

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CropSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    GreenMean,
    Chrom,
    Pos,
}

impl std::str::FromStr for EstimatorMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "green_mean" | "green" => Ok(Self::GreenMean),
            "chrom" => Ok(Self::Chrom),
            "pos" => Ok(Self::Pos),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: EstimatorMethod,
    /// Centered moving-average window in frames; odd.
    pub detrend_window: usize,
    pub hr_band: (f64, f64),
    pub rr_band: (f64, f64),
    /// Disabling the band mask leaves only detrending, which keeps the
    /// estimators exactly linear in the input.
    pub band_limit: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            method: EstimatorMethod::GreenMean,
            detrend_window: 15,
            hr_band: (0.7, 4.0),
            rr_band: (0.1, 0.5),
            band_limit: true,
        }
    }
}

impl EstimatorConfig {
    pub fn with_method(method: EstimatorMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.detrend_window == 0 || self.detrend_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "detrend_window must be odd and positive, got {}",
                self.detrend_window
            )));
        }
        for (name, (lo, hi)) in [("hr_band", self.hr_band), ("rr_band", self.rr_band)] {
            if !(lo >= 0.0 && lo < hi) {
                return Err(Error::Config(format!(
                    "{name} must satisfy 0 <= low < high"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub fps: f64,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysioResponse {
    pub pulse: Waveform,
    pub resp: Waveform,
    /// Set when the input had no temporal variation; both waveforms are zero.
    pub degenerate: bool,
}

/// A black-box crops to waveforms function. The built-in estimators are
/// selected through [`EstimatorConfig`]; external models can implement this.
pub trait Estimator: Sync {
    fn estimate(&self, crops: &CropSequence) -> Result<PhysioResponse>;
}

impl Estimator for EstimatorConfig {
    fn estimate(&self, crops: &CropSequence) -> Result<PhysioResponse> {
        estimate_waveforms(crops, self)
    }
}

/// Per-frame spatial means of the R, G and B channels.
pub fn channel_means(crops: &CropSequence) -> [Vec<f64>; 3] {
    let frames = crops.frames();
    let (t, h, w, _) = frames.dim();
    let n = (h * w) as f64;
    let mut out = [vec![0.0; t], vec![0.0; t], vec![0.0; t]];
    for (f, frame) in frames.outer_iter().enumerate() {
        let mut sums = [0.0f64; 3];
        for px in frame.rows() {
            for (c, &v) in px.iter().enumerate() {
                sums[c] += v as f64;
            }
        }
        for c in 0..3 {
            out[c][f] = sums[c] / n;
        }
    }
    out
}

pub fn estimate_waveforms(crops: &CropSequence, cfg: &EstimatorConfig) -> Result<PhysioResponse> {
    cfg.validate()?;
    let t = crops.len();
    if t < cfg.detrend_window {
        return Err(Error::TooShort {
            frames: t,
            window: cfg.detrend_window,
        });
    }
    let fps = crops.fps();
    let [r, g, b] = channel_means(crops);
    let constant = |x: &[f64]| x.iter().all(|&v| v == x[0]);
    if constant(&r) && constant(&g) && constant(&b) {
        let zero = Waveform {
            samples: vec![0.0; t],
            fps,
        };
        return Ok(PhysioResponse {
            pulse: zero.clone(),
            resp: zero,
            degenerate: true,
        });
    }

    let condition = |x: &[f64], band: (f64, f64)| {
        let mut y = detrend(x, cfg.detrend_window);
        if cfg.band_limit {
            y = band_limit(&y, fps, band);
        }
        y
    };

    let pulse = match cfg.method {
        EstimatorMethod::GreenMean => condition(&g, cfg.hr_band),
        EstimatorMethod::Chrom => {
            let (rn, gn, bn) = (normalize(&r), normalize(&g), normalize(&b));
            let x: Vec<f64> = (0..t).map(|i| 3.0 * rn[i] - 2.0 * gn[i]).collect();
            let y: Vec<f64> = (0..t).map(|i| 1.5 * rn[i] + gn[i] - 1.5 * bn[i]).collect();
            let xf = condition(&x, cfg.hr_band);
            let yf = condition(&y, cfg.hr_band);
            let alpha = ratio(std_dev(&xf), std_dev(&yf));
            xf.iter().zip(&yf).map(|(a, b)| a - alpha * b).collect()
        }
        EstimatorMethod::Pos => {
            let (rn, gn, bn) = (normalize(&r), normalize(&g), normalize(&b));
            let s1: Vec<f64> = (0..t).map(|i| gn[i] - bn[i]).collect();
            let s2: Vec<f64> = (0..t).map(|i| gn[i] + bn[i] - 2.0 * rn[i]).collect();
            let alpha = ratio(std_dev(&s1), std_dev(&s2));
            let h: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
            condition(&h, cfg.hr_band)
        }
    };
    let luma: Vec<f64> = (0..t)
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect();
    let resp = condition(&luma, cfg.rr_band);

    Ok(PhysioResponse {
        pulse: Waveform {
            samples: center(pulse),
            fps,
        },
        resp: Waveform {
            samples: center(resp),
            fps,
        },
        degenerate: false,
    })
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let m = mean(x);
    if m.abs() < 1e-12 {
        x.to_vec()
    } else {
        x.iter().map(|v| v / m).collect()
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

pub(crate) fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn center(mut x: Vec<f64>) -> Vec<f64> {
    let m = mean(&x);
    x.iter_mut().for_each(|v| *v -= m);
    x
}

/// Subtracts a centered moving average; the window shrinks symmetrically
/// near the ends. The result is also mean-centred.
pub fn detrend(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = window / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let reach = half.min(i).min(n - 1 - i);
            let lo = i - reach;
            let hi = i + reach + 1;
            x[i] - (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();
    center(y)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let plan = if inverse {
            p.plan_fft_inverse(buf.len())
        } else {
            p.plan_fft_forward(buf.len())
        };
        plan.process(buf);
    });
}

/// Zero-pads to hold at least eight bins inside the band, zeroes every bin
/// outside `band`, inverts, and keeps the first `x.len()` samples.
pub fn band_limit(x: &[f64], fps: f64, band: (f64, f64)) -> Vec<f64> {
    let t = x.len();
    if t == 0 {
        return Vec::new();
    }
    let width = (band.1 - band.0).max(f64::EPSILON);
    let n = t.max((8.0 * fps / width).ceil() as usize);
    let mut buf: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    fft(&mut buf, false);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * fps / n as f64;
        if f < band.0 || f > band.1 {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    fft(&mut buf, true);
    buf[..t].iter().map(|c| c.re / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub frequency: f64,
    pub magnitude: f64,
}

/// Strongest plain-DFT bin (no padding) whose frequency lies inside `band`.
pub fn dominant_frequency(w: &Waveform, band: (f64, f64)) -> Result<SpectralPeak> {
    let t = w.len();
    if t < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples, got {t}")));
    }
    if band.1 > w.fps / 2.0 + 1e-12 || band.0 > band.1 {
        return Err(Error::Invalid(format!(
            "band {:?} not within Nyquist {}",
            band,
            w.fps / 2.0
        )));
    }
    let mut buf: Vec<Complex64> = w.samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft(&mut buf, false);
    let mut best: Option<SpectralPeak> = None;
    for (k, c) in buf.iter().enumerate().take(t / 2 + 1) {
        let f = k as f64 * w.fps / t as f64;
        if f < band.0 || f > band.1 {
            continue;
        }
        let m = c.norm();
        if best.is_none_or(|b| m > b.magnitude) {
            best = Some(SpectralPeak {
                frequency: f,
                magnitude: m,
            });
        }
    }
    best.ok_or(Error::EmptyBand {
        low: band.0,
        high: band.1,
    })
}
