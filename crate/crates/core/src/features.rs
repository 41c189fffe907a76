//! Framing, log mel filterbank energies, MFCCs and per-utterance
//! mean/variance normalization.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::Waveform;
use crate::Scalar;

pub mod cache;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("signal has {len} samples, fewer than one hop ({hop})")]
    SignalTooShort { len: usize, hop: usize },
    #[error("normalization needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("utterance has {have} samples, {needed} needed")]
    UtteranceTooShort { have: usize, needed: usize },
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    LogFilterbank,
    Mfcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub num_filters: usize,
    /// Only used in MFCC mode.
    pub num_ceps: usize,
    pub fft_size: usize,
    pub mode: FeatureMode,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            num_filters: 40,
            num_ceps: 40,
            fft_size: 512,
            mode: FeatureMode::LogFilterbank,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn mfcc() -> Self {
        Self {
            mode: FeatureMode::Mfcc,
            ..Self::default()
        }
    }

    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frames_per_second(&self) -> f64 {
        1000.0 / self.hop_ms
    }

    /// Frame count of a crop lasting `duration_s`.
    pub fn frames_for(&self, duration_s: f64, sample_rate: u32) -> usize {
        let samples = (duration_s * sample_rate as f64).round() as usize;
        samples.div_ceil(self.hop_len(sample_rate))
    }

    pub fn num_coeffs(&self) -> usize {
        match self.mode {
            FeatureMode::LogFilterbank => self.num_filters,
            FeatureMode::Mfcc => self.num_ceps,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidConfig(m));
        if !(self.hop_ms > 0.0 && self.hop_ms < self.window_ms) {
            return bad(format!(
                "hop {} ms must be positive and shorter than window {} ms",
                self.hop_ms, self.window_ms
            ));
        }
        if self.hop_len(sample_rate) == 0 {
            return bad("hop rounds to zero samples".into());
        }
        if self.num_filters == 0 {
            return bad("num_filters must be positive".into());
        }
        if self.mode == FeatureMode::Mfcc && (self.num_ceps == 0 || self.num_ceps > self.num_filters) {
            return bad(format!(
                "num_ceps {} must be in 1..={}",
                self.num_ceps, self.num_filters
            ));
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.window_len(sample_rate) {
            return bad(format!(
                "fft_size {} must be a power of two >= {} samples",
                self.fft_size,
                self.window_len(sample_rate)
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded. Binds checkpoints
    /// and caches to the front-end that produced them.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A normalized frames x coefficients matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow<T> {
    pub values: Array2<T>,
    pub duration_s: f64,
}

impl<T: Scalar> FeatureWindow<T> {
    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_coeffs(&self) -> usize {
        self.values.ncols()
    }
}

pub fn hamming<T: Scalar>(n: usize) -> Vec<T> {
    if n == 1 {
        return vec![T::one()];
    }
    (0..n)
        .map(|i| T::of(0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// Splits into Hamming-windowed frames, `ceil(len / hop)` of them, zero
/// padding past the end of the signal.
pub fn frame_signal<T: Scalar>(w: &Waveform<T>, cfg: &FeatureConfig) -> Result<Array2<T>, FeatureError> {
    let win = cfg.window_len(w.sample_rate);
    let hop = cfg.hop_len(w.sample_rate);
    let len = w.samples.len();
    if len < hop {
        return Err(FeatureError::SignalTooShort { len, hop });
    }
    let num_frames = len.div_ceil(hop);
    let window = hamming::<T>(win);
    let mut frames = Array2::zeros((num_frames, win));
    for (f, mut row) in frames.outer_iter_mut().enumerate() {
        let start = f * hop;
        let end = (start + win).min(len);
        for (j, &x) in w.samples[start..end].iter().enumerate() {
            row[j] = x * window[j];
        }
    }
    Ok(frames)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with mel-spaced centers from 0 Hz to Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank<T> {
    /// num_filters x (fft_size / 2 + 1)
    pub weights: Array2<T>,
    pub edges_hz: Vec<f64>,
}

impl<T: Scalar> MelFilterbank<T> {
    pub fn new(num_filters: usize, fft_size: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..num_filters + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (num_filters + 1) as f64))
            .collect();
        let bins = fft_size / 2 + 1;
        let mut weights = Array2::zeros((num_filters, bins));
        for k in 0..num_filters {
            let (lo, mid, hi) = (edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]);
            for b in 0..bins {
                let f = b as f64 * sample_rate as f64 / fft_size as f64;
                let v = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[[k, b]] = T::of(v);
            }
        }
        Self { weights, edges_hz }
    }

    pub fn center_hz(&self, k: usize) -> f64 {
        self.edges_hz[k + 1]
    }
}

/// Reusable front-end: FFT plan, window and filterbank for one config.
pub struct FeatureExtractor<T: Scalar> {
    cfg: FeatureConfig,
    sample_rate: u32,
    fft: Arc<dyn Fft<T>>,
    filterbank: MelFilterbank<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(cfg: FeatureConfig, sample_rate: u32) -> Result<Self, FeatureError> {
        cfg.validate(sample_rate)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let filterbank = MelFilterbank::new(cfg.num_filters, cfg.fft_size, sample_rate);
        Ok(Self {
            cfg,
            sample_rate,
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn filterbank(&self) -> &MelFilterbank<T> {
        &self.filterbank
    }

    /// Power spectrum of each windowed frame, `fft_size / 2 + 1` bins.
    pub fn power_spectrum(&self, frames: &Array2<T>) -> Array2<T> {
        let n = self.cfg.fft_size;
        let bins = n / 2 + 1;
        let mut out = Array2::zeros((frames.nrows(), bins));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        for (row, mut dst) in frames.outer_iter().zip(out.outer_iter_mut()) {
            for (j, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(row.get(j).copied().unwrap_or_else(T::zero), T::zero());
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (d, c) in dst.iter_mut().zip(&buf[..bins]) {
                *d = c.norm_sqr();
            }
        }
        out
    }

    pub fn log_mel(&self, frames: &Array2<T>) -> Array2<T> {
        let power = self.power_spectrum(frames);
        let floor = T::of(self.cfg.log_floor);
        let mut energies = power.dot(&self.filterbank.weights.t());
        energies.mapv_inplace(|e| e.max(floor).ln());
        energies
    }

    pub fn mfcc(&self, frames: &Array2<T>) -> Array2<T> {
        let basis = dct_basis::<T>(self.cfg.num_filters, self.cfg.num_ceps);
        self.log_mel(frames).dot(&basis.t())
    }

    /// Raw (unnormalized) coefficients for every frame of the waveform.
    pub fn coefficients(&self, w: &Waveform<T>) -> Result<Array2<T>, FeatureError> {
        let frames = frame_signal(w, &self.cfg)?;
        Ok(match self.cfg.mode {
            FeatureMode::LogFilterbank => self.log_mel(&frames),
            FeatureMode::Mfcc => self.mfcc(&frames),
        })
    }

    /// Normalized window over the first `duration_s` seconds.
    pub fn window(&self, w: &Waveform<T>, duration_s: f64) -> Result<FeatureWindow<T>, FeatureError> {
        let needed = (duration_s * w.sample_rate as f64).round() as usize;
        if needed == 0 || w.samples.len() < needed {
            return Err(FeatureError::UtteranceTooShort {
                have: w.samples.len(),
                needed,
            });
        }
        let head = Waveform::new(w.samples[..needed].to_vec(), w.sample_rate);
        let raw = self.coefficients(&head)?;
        Ok(FeatureWindow {
            values: normalize(&raw)?,
            duration_s,
        })
    }
}

/// Orthonormal DCT-II basis, `num_out x n` (rows are basis vectors).
pub fn dct_basis<T: Scalar>(n: usize, num_out: usize) -> Array2<T> {
    Array2::from_shape_fn((num_out, n), |(k, i)| {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        T::of(scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
    })
}

/// Orthonormal DCT-II of `x`, first `num_out` coefficients.
pub fn dct<T: Scalar>(x: ArrayView1<T>, num_out: usize) -> Vec<T> {
    dct_basis::<T>(x.len(), num_out).dot(&x).to_vec()
}

/// Inverse of the full orthonormal DCT-II (a DCT-III).
pub fn idct<T: Scalar>(c: ArrayView1<T>) -> Vec<T> {
    dct_basis::<T>(c.len(), c.len()).t().dot(&c).to_vec()
}

pub fn log_mel_energies<T: Scalar>(
    frames: &Array2<T>,
    cfg: &FeatureConfig,
    sample_rate: u32,
) -> Result<Array2<T>, FeatureError> {
    Ok(FeatureExtractor::new(*cfg, sample_rate)?.log_mel(frames))
}

pub fn mfcc<T: Scalar>(frames: &Array2<T>, cfg: &FeatureConfig, sample_rate: u32) -> Result<Array2<T>, FeatureError> {
    if cfg.mode != FeatureMode::Mfcc {
        return Err(FeatureError::InvalidConfig("mfcc requires mode = mfcc".into()));
    }
    Ok(FeatureExtractor::new(*cfg, sample_rate)?.mfcc(frames))
}

/// Per-column mean subtraction and division by the population standard
/// deviation. Near-constant columns (std < 1e-12) are only centered.
pub fn normalize<T: Scalar>(m: &Array2<T>) -> Result<Array2<T>, FeatureError> {
    let n = m.nrows();
    if n < 2 {
        return Err(FeatureError::TooFewFrames(n));
    }
    let nf = T::of_usize(n);
    let mut out = m.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let mean = col.iter().copied().sum::<T>() / nf;
        col.mapv_inplace(|v| v - mean);
        let var = col.iter().map(|&v| v * v).sum::<T>() / nf;
        let std = var.sqrt();
        if std >= T::of(1e-12) {
            col.mapv_inplace(|v| v / std);
        }
    }
    Ok(out)
}

/// One-shot version of [`FeatureExtractor::window`].
pub fn extract_window<T: Scalar>(
    w: &Waveform<T>,
    cfg: &FeatureConfig,
    duration_s: f64,
) -> Result<FeatureWindow<T>, FeatureError> {
    FeatureExtractor::new(*cfg, w.sample_rate)?.window(w, duration_s)
}

/// Normalized window from a slice of raw coefficient rows.
pub fn window_from_rows<T: Scalar>(
    raw: &Array2<T>,
    start: usize,
    frames: usize,
    duration_s: f64,
) -> Result<FeatureWindow<T>, FeatureError> {
    let values = normalize(&raw.slice(s![start..start + frames, ..]).to_owned())?;
    Ok(FeatureWindow { values, duration_s })
}
