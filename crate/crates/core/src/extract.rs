//! Representations from a frozen codec + language model: resample, normalize,
//! codify, run the model over the first window with placeholder metadata,
//! and mean-pool each selected layer over audio positions.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::audio::{normalize, resample, AudioClip};
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::features::{Family, PooledRepresentation};
use crate::lm::{mean_pool, LanguageModel, LmConfig};
use crate::par;
use crate::probe::{grid_search, GridAxes, ProbeData, ProbeModel, Schedule, Task, TrainSplit, ValidSplit};

/// `ceil(L/2)` in 1-based numbering.
pub fn middle_layer(layers: usize) -> usize {
    layers.div_ceil(2).max(1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerStrategy {
    Middle,
    /// Every `n`-th layer: n, 2n, ...
    Subsample(usize),
    /// Greedy forward selection of `budget` layers by linear-probe validation score.
    Greedy { task: Task, budget: usize },
    Layers(Vec<usize>),
}

impl LayerStrategy {
    /// Layer list for strategies that need no data. Greedy must be resolved
    /// with [`greedy_layer_select`].
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>> {
        let out = match self {
            LayerStrategy::Middle => vec![middle_layer(layers)],
            LayerStrategy::Subsample(n) => {
                if *n == 0 || *n > layers {
                    return Err(Error::invalid(format!("subsample stride {n} outside 1..={layers}")));
                }
                (1..=layers / n).map(|i| i * n).collect()
            }
            LayerStrategy::Layers(list) => {
                if list.is_empty() {
                    return Err(Error::invalid("empty layer list"));
                }
                if let Some(l) = list.iter().find(|&&l| l == 0 || l > layers) {
                    return Err(Error::invalid(format!("layer {l} outside 1..={layers}")));
                }
                list.clone()
            }
            LayerStrategy::Greedy { .. } => {
                return Err(Error::invalid("greedy layer selection needs probe data"));
            }
        };
        Ok(out)
    }
}

impl fmt::Display for LayerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerStrategy::Middle => f.write_str("middle"),
            LayerStrategy::Subsample(n) => write!(f, "subsample:{n}"),
            LayerStrategy::Greedy { task, budget } => write!(f, "greedy:{task}:{budget}"),
            LayerStrategy::Layers(l) => {
                let parts: Vec<String> = l.iter().map(|x| x.to_string()).collect();
                write!(f, "layers:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for LayerStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad layer strategy `{s}` (middle|subsample:N|greedy:task:B|layers:1,3,5)"));
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["middle"] => Ok(LayerStrategy::Middle),
            ["subsample", n] => Ok(LayerStrategy::Subsample(num(n)?)),
            ["greedy", task, b] => Ok(LayerStrategy::Greedy {
                task: task.parse()?,
                budget: num(b)?,
            }),
            ["layers", list] => Ok(LayerStrategy::Layers(list.split(',').map(num).collect::<Result<_>>()?)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for LayerStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionSpec {
    /// Audio fed to the model per clip; capped by the model context.
    pub window_seconds: f64,
    pub strategy: LayerStrategy,
}

impl Default for ExtractionSpec {
    fn default() -> Self {
        Self {
            window_seconds: 24.0,
            strategy: LayerStrategy::Middle,
        }
    }
}

/// Codes per extraction window.
pub fn window_tokens(spec: &ExtractionSpec, codec: &Codec, lm: &LanguageModel) -> usize {
    let want = (spec.window_seconds * codec.config.code_rate()).ceil() as usize;
    want.clamp(1, lm.config.context)
}

/// Resample to the codec rate and peak-normalize.
pub fn prepare(clip: &AudioClip, codec: &Codec) -> Result<AudioClip> {
    Ok(normalize(&resample(clip, codec.config.sample_rate)?))
}

/// Pooled vectors of every layer (1..=L) over the first window of `clip`.
pub fn pooled_layers(clip: &AudioClip, codec: &Codec, lm: &LanguageModel, spec: &ExtractionSpec) -> Result<Vec<Vec<f64>>> {
    Ok(pooled_windows(clip, codec, lm, spec, false)?.swap_remove(0))
}

/// Sample ranges of the model windows of a prepared clip of `len` samples:
/// every whole window when `all`, else the first. A clip shorter than one
/// window is a single window.
pub fn window_ranges(len: usize, window: usize, all: bool) -> Vec<Range<usize>> {
    if len <= window {
        vec![0..len]
    } else if all {
        (0..len / window).map(|i| i * window..(i + 1) * window).collect()
    } else {
        vec![0..window]
    }
}

/// Pooled vectors of every layer for each model window of `clip`
/// (`[window][layer][dim]`).
pub fn pooled_windows(
    clip: &AudioClip,
    codec: &Codec,
    lm: &LanguageModel,
    spec: &ExtractionSpec,
    all_windows: bool,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let clip = prepare(clip, codec)?;
    let hop = codec.hop();
    if clip.len() < hop {
        return Err(Error::ClipTooShort {
            samples: clip.len(),
            required: hop,
        });
    }
    let all: Vec<usize> = (1..=lm.layers()).collect();
    window_ranges(clip.len(), window_tokens(spec, codec, lm) * hop, all_windows)
        .into_iter()
        .map(|r| {
            let codes = codec.encode(&clip.slice(r)?)?;
            // `None` is the placeholder header: clip metadata never reaches the model.
            let (_, stack) = lm.forward(&codes.codes, None, &all)?;
            Ok((0..all.len()).map(|i| mean_pool(&stack, i).to_vec()).collect())
        })
        .collect()
}

/// Concatenation of the pooled vectors of `layers` (1-based), in list order.
pub fn concat_layers(pooled: &[Vec<f64>], layers: &[usize]) -> Vec<f64> {
    layers.iter().flat_map(|&l| pooled[l - 1].iter().copied()).collect()
}

/// One clip's representation under a data-free strategy.
pub fn extract(clip: &AudioClip, codec: &Codec, lm: &LanguageModel, spec: &ExtractionSpec, clip_id: &str) -> Result<PooledRepresentation> {
    let layers = spec.strategy.resolve(lm.layers())?;
    let pooled = pooled_layers(clip, codec, lm, spec)?;
    PooledRepresentation::new(concat_layers(&pooled, &layers), Family::Calm(layers), clip_id)
}

/// All-layer pooled vectors for many clips, in input order.
pub fn pooled_layers_batch(clips: &[AudioClip], codec: &Codec, lm: &LanguageModel, spec: &ExtractionSpec) -> Result<Vec<Vec<Vec<f64>>>> {
    par::map(clips, |c| pooled_layers(c, codec, lm, spec)).into_iter().collect()
}

/// Bytes to store unpooled activations of every layer as f32.
pub fn activation_budget(tokens: u64, config: &LmConfig) -> u64 {
    tokens * config.layers as u64 * config.d_model as u64 * 4
}

/// Bytes of the mean-pooled activations of every layer as f32.
pub fn pooled_budget(config: &LmConfig) -> u64 {
    activation_budget(1, config)
}

/// Column block of layer `l` (1-based) in an all-layer feature matrix.
fn layer_columns(x: &Array2<f64>, d: usize, layers: &[usize]) -> Array2<f64> {
    let blocks: Vec<_> = layers.iter().map(|&l| x.slice(s![.., (l - 1) * d..l * d])).collect();
    ndarray::concatenate(Axis(1), &blocks).expect("equal row counts")
}

/// Restrict all-layer probe data (layer blocks of width `d`) to `layers`.
pub fn select_layers(data: &ProbeData, d: usize, layers: &[usize]) -> ProbeData {
    ProbeData {
        x: layer_columns(&data.x, d, layers),
        targets: data.targets.clone(),
        clips: data.clips.clone(),
    }
}

/// Probe settings for layer sweeps and greedy selection: linear models only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub axes: GridAxes,
    pub schedule: Schedule,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axes: GridAxes {
                standardize: vec![true],
                model: vec![ProbeModel::Linear],
                batch_size: vec![64],
                learning_rate: vec![1e-3],
                dropout: vec![0.25],
                l2: vec![0.0, 1e-3],
            },
            schedule: Schedule::default(),
        }
    }
}

/// Layer data for one task: all-layer features, `layers` blocks of width `d`.
#[derive(Debug, Clone)]
pub struct LayeredSplits {
    pub task: Task,
    pub train: ProbeData,
    pub valid: ProbeData,
    pub d: usize,
    pub layers: usize,
}

impl LayeredSplits {
    fn score(&self, layers: &[usize], config: &SweepConfig, seed: u64) -> Result<f64> {
        let mut axes = config.axes.clone();
        axes.model = vec![ProbeModel::Linear];
        let train = TrainSplit(select_layers(&self.train, self.d, layers));
        let valid = ValidSplit(select_layers(&self.valid, self.d, layers));
        Ok(grid_search(&train, &valid, None, self.task, &axes, &config.schedule, seed)?
            .best()
            .val_score)
    }
}

/// Min-max normalize; `flat` when all scores are equal (then all zeros).
pub fn normalize_scores(raw: &[f64]) -> (Vec<f64>, bool) {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || hi <= lo {
        return (vec![0.0; raw.len()], true);
    }
    (raw.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSweep {
    pub task: Task,
    /// Validation score per layer, layer 1 first.
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub flat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepReport {
    pub layers: usize,
    pub tasks: Vec<TaskSweep>,
}

impl LayerSweepReport {
    pub fn from_scores(layers: usize, scores: Vec<(Task, Vec<f64>)>) -> Self {
        let tasks = scores
            .into_iter()
            .map(|(task, raw)| {
                let (normalized, flat) = normalize_scores(&raw);
                TaskSweep {
                    task,
                    raw,
                    normalized,
                    flat,
                }
            })
            .collect();
        Self { layers, tasks }
    }

    /// Tab-separated rows `layer, <task normalized>...`, one per layer.
    pub fn table(&self) -> String {
        let mut out = String::from("# per-task min-max normalized validation score; layers are 1-based\nlayer");
        for t in &self.tasks {
            out.push('\t');
            out.push_str(t.task.name());
            if t.flat {
                out.push_str("(flat)");
            }
        }
        out.push('\n');
        for l in 0..self.layers {
            out.push_str(&(l + 1).to_string());
            for t in &self.tasks {
                out.push_str(&format!("\t{:.4}", t.normalized[l]));
            }
            out.push('\n');
        }
        out
    }
}

/// Linear-probe validation score of every single layer, per task.
pub fn layer_sweep(tasks: &[LayeredSplits], config: &SweepConfig, seed: u64) -> Result<LayerSweepReport> {
    let layers = tasks.first().map_or(0, |t| t.layers);
    if tasks.iter().any(|t| t.layers != layers) {
        return Err(Error::invalid("tasks disagree on layer count"));
    }
    let mut scores = Vec::with_capacity(tasks.len());
    for t in tasks {
        let raw = (1..=layers).map(|l| t.score(&[l], config, seed)).collect::<Result<Vec<_>>>()?;
        log::info!("sweep {}: {:?}", t.task, raw);
        scores.push((t.task, raw));
    }
    Ok(LayerSweepReport::from_scores(layers, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedySelection {
    /// Selected layers in selection order.
    pub layers: Vec<usize>,
    /// Validation score of each selected prefix.
    pub scores: Vec<f64>,
}

/// Greedy forward selection: repeatedly add the layer whose concatenation
/// with the current set scores best; ties go to the lower layer.
pub fn greedy_layer_select(data: &LayeredSplits, budget: usize, config: &SweepConfig, seed: u64) -> Result<GreedySelection> {
    if budget == 0 || budget > data.layers {
        return Err(Error::invalid(format!("greedy budget {budget} outside 1..={}", data.layers)));
    }
    let mut chosen: Vec<usize> = Vec::new();
    let mut scores = Vec::new();
    while chosen.len() < budget {
        let mut best: Option<(usize, f64)> = None;
        for l in (1..=data.layers).filter(|l| !chosen.contains(l)) {
            let mut set = chosen.clone();
            set.push(l);
            let s = data.score(&set, config, seed)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((l, s));
            }
        }
        let (l, s) = best.expect("budget within layer count");
        chosen.push(l);
        scores.push(s);
    }
    Ok(GreedySelection { layers: chosen, scores })
}
