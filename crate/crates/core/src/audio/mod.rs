//! Waveform container, resampling and normalization.

mod resample;
pub mod synth;
pub mod wav;

pub use resample::resample;
pub(crate) use resample::decimate_by_two;
pub use synth::{synth_corpus, SynthConfig, SynthLabel};

use crate::error::{Error, Result};

/// Mono waveform with nominal amplitude range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyClip);
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    /// Sub-clip over a sample range, clamped to the clip.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let end = range.end.min(self.samples.len());
        let start = range.start.min(end);
        Self::new(self.samples[start..end].to_vec(), self.sample_rate)
    }
}

/// Peak normalization. An all-zero clip is returned unchanged.
pub fn normalize(clip: &AudioClip) -> AudioClip {
    let peak = clip.peak();
    if peak == 0.0 {
        return clip.clone();
    }
    AudioClip {
        samples: clip.samples.iter().map(|s| s / peak).collect(),
        sample_rate: clip.sample_rate,
    }
}
