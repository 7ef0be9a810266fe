//! Constant-Q chromagram.
//!
//! The constant-Q transform is computed octave by octave: the top octave at
//! the analysis rate, each lower octave on a signal decimated by a further
//! factor of two, so every octave reuses kernels of the same length. Bin
//! magnitudes are folded onto 12 pitch classes and each frame is scaled so its
//! largest class is 1.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::audio::{decimate_by_two, AudioClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChromaConfig {
    pub hop_length: usize,
    /// Lowest bin frequency; should sit on a C so pitch classes align.
    pub fmin: f64,
    pub n_octaves: usize,
    pub bins_per_octave: usize,
}

impl Default for ChromaConfig {
    fn default() -> Self {
        Self {
            hop_length: 512,
            fmin: 65.406_391_325_149_66, // C2
            n_octaves: 6,
            bins_per_octave: 36,
        }
    }
}

impl ChromaConfig {
    fn q(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    /// Longest kernel, in samples at `sample_rate`.
    pub fn analysis_window(&self, sample_rate: u32) -> usize {
        (self.q() * sample_rate as f64 / self.fmin).ceil() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.bins_per_octave % 12 != 0 || self.bins_per_octave == 0 {
            return Err(Error::invalid("bins_per_octave must be a positive multiple of 12"));
        }
        if self.n_octaves == 0 || !(self.fmin > 0.0) {
            return Err(Error::invalid("need at least one octave and a positive fmin"));
        }
        let step = 1usize << (self.n_octaves - 1);
        if self.hop_length == 0 || self.hop_length % step != 0 {
            return Err(Error::invalid(format!(
                "hop length must be a positive multiple of {step} for {} octaves",
                self.n_octaves
            )));
        }
        Ok(())
    }
}

struct CqKernel {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl CqKernel {
    /// Hann-windowed complex exponential at `freq`, L1-normalized.
    fn new(freq: f64, q: f64, sample_rate: f64) -> Self {
        let len = ((q * sample_rate / freq).ceil() as usize).max(1);
        let window: Vec<f64> = (0..len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / len as f64).cos())
            .collect();
        let norm: f64 = window.iter().sum();
        let center = len as f64 / 2.0;
        let (re, im) = window
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let phase = 2.0 * PI * freq * (i as f64 - center) / sample_rate;
                (w * phase.cos() / norm, -w * phase.sin() / norm)
            })
            .unzip();
        Self { re, im }
    }

    /// Magnitude of the response centered at sample `center`, zero outside the signal.
    fn magnitude(&self, x: &[f64], center: usize) -> f64 {
        let len = self.re.len() as i64;
        let first = center as i64 - len / 2;
        let lo = (-first).max(0) as usize;
        let hi = ((x.len() as i64 - first).max(0) as usize).min(self.re.len());
        let (mut re, mut im) = (0.0, 0.0);
        for j in lo..hi {
            let s = x[(first + j as i64) as usize];
            re += s * self.re[j];
            im += s * self.im[j];
        }
        (re * re + im * im).sqrt()
    }
}

pub fn chroma_cq(clip: &AudioClip, config: &ChromaConfig) -> Result<FeatureMatrix> {
    config.validate()?;
    let sr = clip.sample_rate() as f64;
    let window = config.analysis_window(clip.sample_rate());
    if clip.len() < window {
        return Err(Error::ClipTooShort {
            samples: clip.len(),
            required: window,
        });
    }
    let top = config.fmin * 2f64.powi(config.n_octaves as i32);
    if top >= sr / 2.0 {
        return Err(Error::invalid(format!(
            "constant-Q range tops out at {top:.0} Hz, above Nyquist"
        )));
    }

    let bpo = config.bins_per_octave;
    let merge = bpo / 12;
    let q = config.q();
    let n_frames = 1 + clip.len() / config.hop_length;
    let mut chroma = Array2::<f64>::zeros((n_frames, 12));

    let mut signal = clip.samples().to_vec();
    for level in 0..config.n_octaves {
        let octave = config.n_octaves - 1 - level;
        let rate = sr / (1u64 << level) as f64;
        let hop = config.hop_length >> level;
        for b in 0..bpo {
            let bin = octave * bpo + b;
            let freq = config.fmin * 2f64.powf(bin as f64 / bpo as f64);
            let kernel = CqKernel::new(freq, q, rate);
            // Bins within half a semitone of a pitch center fold onto it.
            let pitch_class = ((bin + merge / 2) / merge) % 12;
            for (f, mut row) in chroma.rows_mut().into_iter().enumerate() {
                row[pitch_class] += kernel.magnitude(&signal, f * hop);
            }
        }
        if level + 1 < config.n_octaves {
            signal = decimate_by_two(&signal);
        }
    }

    for mut row in chroma.rows_mut() {
        let max = row.fold(0.0f64, |m, &v| m.max(v));
        if max > 1e-12 {
            row.mapv_inplace(|v| v / max);
        }
    }
    FeatureMatrix::new(chroma, sr / config.hop_length as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const SR: u32 = 22050;

    fn tones(freqs: &[f64], seconds: f64) -> AudioClip {
        let n = (SR as f64 * seconds) as usize;
        let v = (0..n)
            .map(|i| {
                let t = i as f64 / SR as f64;
                freqs.iter().map(|f| (2.0 * PI * f * t).sin()).sum::<f64>() / freqs.len() as f64
            })
            .collect();
        AudioClip::new(v, SR).unwrap()
    }

    fn midi(m: f64) -> f64 {
        440.0 * 2f64.powf((m - 69.0) / 12.0)
    }

    fn interior(m: &FeatureMatrix) -> std::ops::Range<usize> {
        let edge = ChromaConfig::default().analysis_window(SR) / 512 / 2 + 1;
        edge..m.frames() - edge
    }

    fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
        (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
    }

    #[test]
    fn a4_peaks_on_a() {
        let m = chroma_cq(&tones(&[440.0], 3.0), &ChromaConfig::default()).unwrap();
        assert_eq!(m.dims(), 12);
        let range = interior(&m);
        assert!(!range.is_empty());
        for f in range {
            assert_eq!(argmax(m.values().row(f)), 9, "frame {f}");
        }
    }

    #[test]
    fn c_major_triad_top_three() {
        let m = chroma_cq(&tones(&[midi(60.0), midi(64.0), midi(67.0)], 3.0), &ChromaConfig::default())
            .unwrap();
        let range = interior(&m);
        let mut mean = [0.0; 12];
        for f in range.clone() {
            for (p, v) in mean.iter_mut().zip(m.values().row(f)) {
                *p += v / range.len() as f64;
            }
        }
        let mut order: Vec<usize> = (0..12).collect();
        order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]));
        let mut top3 = order[..3].to_vec();
        top3.sort_unstable();
        assert_eq!(top3, vec![0, 4, 7]);
    }

    #[test]
    fn white_noise_is_flat() {
        let mut rng = crate::rng::from_seed(99);
        let v: Vec<f64> = (0..SR as usize * 3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let m = chroma_cq(&AudioClip::new(v, SR).unwrap(), &ChromaConfig::default()).unwrap();
        let mut mean = [0.0; 12];
        for row in m.values().rows() {
            for (p, v) in mean.iter_mut().zip(row) {
                *p += v / m.frames() as f64;
            }
        }
        let avg = mean.iter().sum::<f64>() / 12.0;
        for (p, v) in mean.iter().enumerate() {
            assert!(*v < 2.0 * avg, "class {p}: {v} vs mean {avg}");
        }
    }

    #[test]
    fn octave_shift_keeps_argmax() {
        for m0 in [50.0, 57.0, 62.0] {
            let low = chroma_cq(&tones(&[midi(m0)], 2.0), &ChromaConfig::default()).unwrap();
            let high = chroma_cq(&tones(&[midi(m0 + 12.0)], 2.0), &ChromaConfig::default()).unwrap();
            let f = low.frames() / 2;
            assert_eq!(argmax(low.values().row(f)), argmax(high.values().row(f)));
            assert_eq!(argmax(low.values().row(f)), m0 as usize % 12);
        }
    }

    #[test]
    fn nonnegative_and_finite_on_silence() {
        let c = AudioClip::new(vec![0.0; SR as usize], SR).unwrap();
        let m = chroma_cq(&c, &ChromaConfig::default()).unwrap();
        assert!(m.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn shorter_than_window_is_an_error() {
        let c = tones(&[440.0], 0.5);
        assert!(matches!(
            chroma_cq(&c, &ChromaConfig::default()),
            Err(Error::ClipTooShort { .. })
        ));
    }
}
