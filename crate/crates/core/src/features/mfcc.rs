//! Mel-frequency cepstral coefficients.
//!
//! Conventions follow the common toolkit defaults: periodic Hann window,
//! power spectrum, Slaney-normalized mel filterbank, decibel scaling with an
//! amplitude floor and 80 dB dynamic range, orthonormal DCT-II.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::audio::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub n_coeffs: usize,
    pub n_mels: usize,
    pub frame_length: usize,
    pub hop_length: usize,
    /// Power floor before taking the logarithm.
    pub log_floor: f64,
    /// Dynamic range kept below the clip's loudest mel bin, in dB.
    pub top_db: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_coeffs: 20,
            n_mels: 128,
            frame_length: 2048,
            hop_length: 512,
            log_floor: 1e-10,
            top_db: 80.0,
        }
    }
}

pub(crate) fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectrogram of non-centered frames, frames × (frame_length/2 + 1).
pub(crate) fn power_spectrogram(x: &[f64], frame_length: usize, hop: usize) -> Result<Array2<f64>> {
    if x.len() < frame_length {
        return Err(Error::ClipTooShort {
            samples: x.len(),
            required: frame_length,
        });
    }
    let n_frames = 1 + (x.len() - frame_length) / hop;
    let n_bins = frame_length / 2 + 1;
    let window = periodic_hann(frame_length);
    let fft = FftPlanner::new().plan_fft_forward(frame_length);
    let mut out = Array2::zeros((n_frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); frame_length];
    for (f, mut row) in out.rows_mut().into_iter().enumerate() {
        let start = f * hop;
        for ((b, &s), &w) in buf.iter_mut().zip(&x[start..start + frame_length]).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (r, c) in row.iter_mut().zip(&buf) {
            *r = c.norm_sqr();
        }
    }
    Ok(out)
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Slaney-style mel filterbank spanning 0 Hz to Nyquist, n_mels × (n_fft/2 + 1).
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let sr = sample_rate as f64;
    let fft_freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * sr / n_fft as f64).collect();
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(sr / 2.0));
    let mel_f: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (left, center, right) = (mel_f[m], mel_f[m + 1], mel_f[m + 2]);
        let enorm = 2.0 / (right - left);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let lower = (f - left) / (center - left);
            let upper = (right - f) / (right - center);
            fb[[m, k]] = lower.min(upper).max(0.0) * enorm;
        }
    }
    fb
}

/// Orthonormal DCT-II basis, n_out × n_in.
fn dct_basis(n_in: usize, n_out: usize) -> Array2<f64> {
    let n = n_in as f64;
    Array2::from_shape_fn((n_out, n_in), |(k, i)| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
    })
}

pub fn mfcc(clip: &AudioClip, config: &MfccConfig) -> Result<FeatureMatrix> {
    if config.n_coeffs == 0 || config.n_coeffs > config.n_mels {
        return Err(Error::invalid("n_coeffs must be in 1..=n_mels"));
    }
    if config.hop_length == 0 {
        return Err(Error::invalid("hop length must be positive"));
    }
    let power = power_spectrogram(clip.samples(), config.frame_length, config.hop_length)?;
    let fb = mel_filterbank(clip.sample_rate(), config.frame_length, config.n_mels);
    let mel = power.dot(&fb.t());
    let mut db = mel.mapv(|p| 10.0 * p.max(config.log_floor).log10());
    let max = db.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let floor = max - config.top_db;
    db.mapv_inplace(|v| v.max(floor));
    let coeffs = db.dot(&dct_basis(config.n_mels, config.n_coeffs).t());
    FeatureMatrix::new(
        coeffs,
        clip.sample_rate() as f64 / config.hop_length as f64,
    )
}
