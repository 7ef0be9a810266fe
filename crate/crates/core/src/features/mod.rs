//! Hand-crafted baseline representations and the pooled-representation types
//! shared with the language-model extractor.

pub mod cache;
mod chroma;
mod mfcc;
mod pool;

pub use chroma::{chroma_cq, ChromaConfig};
pub use mfcc::{mel_filterbank, mfcc, MfccConfig};
pub use pool::stats_pool;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::{resample, AudioClip};
use crate::error::{Error, Result};

/// Per-frame features, frames × dims.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
    frame_rate: f64,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>, frame_rate: f64) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::invalid("feature matrix needs at least one dimension"));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature matrix contains non-finite values"));
        }
        Ok(Self { values, frame_rate })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }
}

/// Which representation a pooled vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Family {
    Chroma,
    Mfcc,
    /// Mean-pooled language-model activations from the listed 1-based layers.
    Calm(Vec<usize>),
}

impl Family {
    /// Pooled dimensionality where it is fixed by the family alone.
    pub fn expected_dims(&self) -> Option<usize> {
        match self {
            Family::Chroma => Some(6 * 12),
            Family::Mfcc => Some(6 * MfccConfig::default().n_coeffs),
            Family::Calm(_) => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Chroma => f.write_str("chroma"),
            Family::Mfcc => f.write_str("mfcc"),
            Family::Calm(layers) if layers.len() == 1 => write!(f, "calm-layer-{}", layers[0]),
            Family::Calm(layers) => {
                let parts: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
                write!(f, "calm-layers-{}", parts.join("+"))
            }
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let layers = |rest: &str| -> Result<Vec<usize>> {
            rest.split('+')
                .map(|p| {
                    p.parse::<usize>()
                        .ok()
                        .filter(|&l| l >= 1)
                        .ok_or_else(|| Error::invalid(format!("bad layer `{p}` in family `{s}`")))
                })
                .collect()
        };
        match s {
            "chroma" => Ok(Family::Chroma),
            "mfcc" => Ok(Family::Mfcc),
            _ => {
                if let Some(rest) = s.strip_prefix("calm-layer-") {
                    Ok(Family::Calm(layers(rest)?))
                } else if let Some(rest) = s.strip_prefix("calm-layers-") {
                    Ok(Family::Calm(layers(rest)?))
                } else {
                    Err(Error::invalid(format!("unknown representation family `{s}`")))
                }
            }
        }
    }
}

impl Serialize for Family {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Family {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Fixed-length clip-level feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRepresentation {
    pub vector: Vec<f64>,
    pub family: Family,
    pub source_clip: String,
}

impl PooledRepresentation {
    pub fn new(vector: Vec<f64>, family: Family, source_clip: impl Into<String>) -> Result<Self> {
        if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pooled vector must be non-empty and finite"));
        }
        if let Some(d) = family.expected_dims() {
            if d != vector.len() {
                return Err(Error::invalid(format!(
                    "{family} vector has {} dims, expected {d}",
                    vector.len()
                )));
            }
        }
        Ok(Self {
            vector,
            family,
            source_clip: source_clip.into(),
        })
    }

    pub fn dims(&self) -> usize {
        self.vector.len()
    }
}

/// Analysis settings for both baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub sample_rate: u32,
    pub mfcc: MfccConfig,
    pub chroma: ChromaConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22_050,
            mfcc: MfccConfig::default(),
            chroma: ChromaConfig::default(),
        }
    }
}

/// Resample to the analysis rate, compute the family's frame features, and pool.
pub fn baseline_representation(
    clip: &AudioClip,
    family: &Family,
    config: &BaselineConfig,
    clip_id: &str,
) -> Result<PooledRepresentation> {
    let clip = resample(clip, config.sample_rate)?;
    let frames = match family {
        Family::Chroma => chroma_cq(&clip, &config.chroma)?,
        Family::Mfcc => mfcc(&clip, &config.mfcc)?,
        Family::Calm(_) => {
            return Err(Error::invalid("language-model families are not baselines"));
        }
    };
    let pooled = stats_pool(&frames)?;
    PooledRepresentation::new(pooled, family.clone(), clip_id)
}
