//! Deterministic labeled corpus of additive-harmonic chord progressions.
//!
//! Each clip plays a diatonic progression in its labeled key. The timbre class
//! fixes the harmonic amplitude recipe and note envelope (a stand-in for
//! genre), and intensity scales loudness and brightness (a stand-in for
//! arousal). Tags are a deterministic function of the other labels.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::key::{KeyLabel, Mode};
use crate::par;
use crate::rng;

pub const TAG_COUNT: usize = 50;
const COMBO_TAGS: usize = 23;
/// Harmonics that land on a chord tone's own pitch class.
const HARMONICS: [u32; 7] = [1, 2, 3, 4, 5, 6, 8];
const ATTACK_SECONDS: f64 = 0.01;
const RELEASE_SECONDS: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub timbre_classes: usize,
    /// Gaussian noise level relative to the rendered peak.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            timbre_classes: 10,
            noise: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLabel {
    pub key: KeyLabel,
    pub timbre_class: usize,
    pub intensity: f64,
    /// Sorted indices into [`tag_names`].
    pub tag_set: Vec<usize>,
}

impl SynthLabel {
    pub fn new(key: KeyLabel, timbre_class: usize, intensity: f64) -> Self {
        let intensity = intensity.clamp(0.0, 1.0);
        Self {
            key,
            timbre_class,
            intensity,
            tag_set: derive_tags(key, timbre_class, intensity),
        }
    }

    /// Valence proxy: major keys and brighter timbres read as more positive.
    pub fn valence(&self, timbre_classes: usize) -> f64 {
        let mode = if self.key.mode() == Mode::Major { 0.7 } else { 0.3 };
        let bright = if timbre_classes > 1 {
            1.0 - self.timbre_class as f64 / (timbre_classes - 1) as f64
        } else {
            0.5
        };
        mode + 0.2 * (bright - 0.5)
    }

    pub fn arousal(&self) -> f64 {
        self.intensity
    }
}

pub fn tag_names() -> Vec<String> {
    let mut names: Vec<String> = crate::key::PITCH_CLASS_NAMES
        .iter()
        .map(|p| format!("tonic-{p}"))
        .collect();
    names.push("major".into());
    names.push("minor".into());
    names.extend((0..10).map(|c| format!("timbre-{c}")));
    names.extend(["soft", "medium", "loud"].map(String::from));
    names.extend((0..COMBO_TAGS).map(|c| format!("combo-{c}")));
    debug_assert_eq!(names.len(), TAG_COUNT);
    names
}

fn intensity_bucket(intensity: f64) -> usize {
    ((intensity * 3.0) as usize).min(2)
}

fn derive_tags(key: KeyLabel, timbre: usize, intensity: f64) -> Vec<usize> {
    let bucket = intensity_bucket(intensity);
    let mut tags = vec![
        key.tonic() as usize,
        12 + usize::from(key.mode() == Mode::Minor),
        14 + timbre % 10,
        24 + bucket,
        27 + (key.index() * 7 + timbre * 3 + bucket) % COMBO_TAGS,
    ];
    tags.sort_unstable();
    tags.dedup();
    tags
}

/// Everything needed to render one clip.
#[derive(Debug, Clone)]
pub struct ClipRecipe {
    pub label: SynthLabel,
    pub duration: f64,
    pub progression: usize,
    pub chord_seconds: f64,
    pub seed: u64,
}

const MAJOR_PROGRESSIONS: [[usize; 4]; 4] = [[0, 3, 4, 0], [0, 5, 3, 4], [0, 4, 5, 3], [0, 3, 0, 4]];
const MINOR_PROGRESSIONS: [[usize; 4]; 4] = [[0, 3, 4, 0], [0, 5, 2, 6], [0, 3, 6, 2], [0, 5, 3, 4]];

struct Timbre {
    amplitudes: [f64; HARMONICS.len()],
    decay: f64,
}

fn timbre(class: usize, classes: usize, intensity: f64) -> Timbre {
    let classes = classes.max(1);
    let slope = 0.4 + 2.0 * ((class * 3) % classes) as f64 / classes as f64;
    let even = if class % 2 == 0 { 1.0 } else { 0.2 };
    let decays = [0.12, 0.25, 0.5, 1.0, f64::INFINITY];
    let mut amplitudes = [0.0; HARMONICS.len()];
    for (a, &h) in amplitudes.iter_mut().zip(&HARMONICS) {
        let parity = if h % 2 == 0 && h > 1 { even } else { 1.0 };
        let bright = 1.0 + intensity * 0.4 * (h - 1) as f64;
        *a = (h as f64).powf(-slope) * parity * bright;
    }
    Timbre {
        amplitudes,
        decay: decays[class % decays.len()],
    }
}

fn midi_to_hz(m: f64) -> f64 {
    440.0 * 2f64.powf((m - 69.0) / 12.0)
}

/// Render a clip; amplitude is peak-scaled then multiplied by an
/// intensity-dependent gain, so louder labels are strictly louder.
pub fn render(recipe: &ClipRecipe, config: &SynthConfig) -> AudioClip {
    let sr = config.sample_rate as f64;
    let n = ((recipe.duration * sr).round() as usize).max(1);
    let label = &recipe.label;
    let key = label.key;
    let scale = key.scale();
    let steps = match key.mode() {
        Mode::Major => crate::key::MAJOR_SCALE,
        Mode::Minor => crate::key::NATURAL_MINOR_SCALE,
    };
    let progression = match key.mode() {
        Mode::Major => MAJOR_PROGRESSIONS[recipe.progression % 4],
        Mode::Minor => MINOR_PROGRESSIONS[recipe.progression % 4],
    };
    debug_assert_eq!(scale[0], key.tonic());
    let tim = timbre(label.timbre_class, config.timbre_classes, label.intensity);
    let mut rng = rng::from_seed(recipe.seed);
    let chord_len = ((recipe.chord_seconds * sr) as usize).max(1);
    let mut out = vec![0.0; n];

    for (ci, start) in (0..n).step_by(chord_len).enumerate() {
        let degree = progression[ci % progression.len()];
        let end = (start + chord_len).min(n);
        let env: Vec<f64> = (start..end)
            .map(|i| {
                let t = (i - start) as f64 / sr;
                let release = ((end - i) as f64 / sr / RELEASE_SECONDS).min(1.0);
                (1.0 - (-t / ATTACK_SECONDS).exp()) * (-t / tim.decay).exp() * release
            })
            .collect();
        for voice in 0..3 {
            let d = degree + 2 * voice;
            let semis = steps[d % 7] as f64 + 12.0 * (d / 7) as f64;
            let f0 = midi_to_hz(48.0 + key.tonic() as f64 + semis);
            for (&h, &amp) in HARMONICS.iter().zip(&tim.amplitudes) {
                let f = f0 * h as f64;
                if f >= 0.45 * sr {
                    continue;
                }
                let phase: f64 = rng.random::<f64>() * 2.0 * PI;
                let w = 2.0 * PI * f / sr;
                for ((j, o), e) in out[start..end].iter_mut().enumerate().zip(&env) {
                    *o += amp * e * (w * j as f64 + phase).sin();
                }
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|s| *s /= peak);
    }
    for s in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *s += config.noise * z;
    }
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-12);
    let gain = (0.05 + 0.9 * label.intensity) / peak;
    out.iter_mut().for_each(|s| *s *= gain);
    AudioClip::new(out, config.sample_rate).expect("rendered clip is finite and non-empty")
}

/// Draw the recipes for a corpus. Keys cycle through all 24 from a seeded
/// offset so any corpus of at least 24 clips covers every key.
pub fn recipes(n_clips: usize, duration: f64, seed: u64, config: &SynthConfig) -> Vec<ClipRecipe> {
    let offset = rng::stream(seed, "synth/key-offset").random_range(0..KeyLabel::COUNT);
    (0..n_clips)
        .map(|i| {
            let clip_seed = rng::derive_indexed(seed, "synth/clip", i as u64);
            let mut r = rng::from_seed(clip_seed);
            let key = KeyLabel::from_index((i + offset) % KeyLabel::COUNT).expect("in range");
            let timbre_class = r.random_range(0..config.timbre_classes.max(1));
            let intensity = r.random::<f64>();
            ClipRecipe {
                label: SynthLabel::new(key, timbre_class, intensity),
                duration,
                progression: r.random_range(0..4),
                chord_seconds: 0.4 + 0.4 * r.random::<f64>(),
                seed: rng::derive_seed(clip_seed, "render"),
            }
        })
        .collect()
}

/// Generate `n_clips` labeled clips of `duration` seconds at the default rate.
pub fn synth_corpus(n_clips: usize, duration: f64, seed: u64) -> Vec<(AudioClip, SynthLabel)> {
    synth_corpus_with(&SynthConfig::default(), n_clips, duration, seed)
}

pub fn synth_corpus_with(
    config: &SynthConfig,
    n_clips: usize,
    duration: f64,
    seed: u64,
) -> Vec<(AudioClip, SynthLabel)> {
    let recipes = recipes(n_clips.max(1), duration, seed, config);
    par::map(&recipes, |r| (render(r, config), r.label.clone()))
}
