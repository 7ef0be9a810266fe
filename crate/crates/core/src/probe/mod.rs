//! Shallow probes on frozen representations: task schemas, the
//! hyperparameter grid, early-stopped training and window ensembling.

mod grid;
mod model;
mod train;

pub use grid::{grid_search, run_grid, GridAxes, GridResult, ProbeConfig, ProbeModel};
pub use model::{Encoded, ProbeNet};
pub use train::{evaluate, train_probe, ProbeResult, Schedule, Standardizer, TaskScores, TrainedProbe, MLP_HIDDEN};

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key::KeyLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Tagging,
    Genre,
    Key,
    Emotion,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Tagging, Task::Genre, Task::Key, Task::Emotion];

    pub fn n_outputs(self) -> usize {
        match self {
            Task::Tagging => 50,
            Task::Genre => 10,
            Task::Key => 24,
            Task::Emotion => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Tagging => "tagging",
            Task::Genre => "genre",
            Task::Key => "key",
            Task::Emotion => "emotion",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Task::Genre | Task::Key)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?} (expected tagging|genre|key|emotion)")))
    }
}

/// Label of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    /// Indices of the positive tags.
    Tags(Vec<usize>),
    Class(usize),
    Key(KeyLabel),
    Emotion { arousal: f64, valence: f64 },
}

impl Target {
    pub fn matches(&self, task: Task) -> bool {
        match (self, task) {
            (Target::Tags(t), Task::Tagging) => t.iter().all(|&i| i < 50),
            (Target::Class(c), Task::Genre) => *c < 10,
            (Target::Key(_), Task::Key) => true,
            (Target::Emotion { arousal, valence }, Task::Emotion) => arousal.is_finite() && valence.is_finite(),
            _ => false,
        }
    }
}

/// Feature rows with their labels and the clip each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub x: Array2<f64>,
    pub targets: Vec<Target>,
    /// Clip index per row; rows of one clip are ensembled at evaluation.
    pub clips: Vec<usize>,
}

impl ProbeData {
    pub fn new(x: Array2<f64>, targets: Vec<Target>, clips: Vec<usize>, task: Task) -> Result<Self> {
        if x.nrows() != targets.len() || x.nrows() != clips.len() {
            return Err(Error::LengthMismatch {
                left: x.nrows(),
                right: targets.len(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("probe split has no examples"));
        }
        if let Some(i) = targets.iter().position(|t| !t.matches(task)) {
            return Err(Error::invalid(format!("row {i}: label does not fit the {task} schema")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(Self { x, targets, clips })
    }

    /// One row per clip.
    pub fn from_rows(rows: Vec<Vec<f64>>, targets: Vec<Target>, task: Task) -> Result<Self> {
        let n = rows.len();
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::invalid("feature rows differ in length"));
        }
        let x = Array2::from_shape_vec((n, dims), rows.into_iter().flatten().collect())
            .map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(x, targets, (0..n).collect(), task)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.x.ncols()
    }
}

/// Training rows: the only split standardization statistics may see.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSplit(pub ProbeData);
/// Validation rows: drive early stopping and config selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidSplit(pub ProbeData);
/// Test rows: scored once per trained probe, never used for decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit(pub ProbeData);

/// Sample ranges of the examples a clip contributes to `task`.
///
/// Key clips yield one example per whole window (a clip shorter than one
/// window yields itself); other tasks keep only the first window.
pub fn windowize(samples: usize, sample_rate: u32, task: Task, window_seconds: f64) -> Vec<std::ops::Range<usize>> {
    let w = ((window_seconds * sample_rate as f64).round() as usize).max(1);
    if samples <= w {
        return vec![0..samples];
    }
    match task {
        Task::Key => (0..samples / w).map(|i| i * w..(i + 1) * w).collect(),
        _ => vec![0..w],
    }
}

/// Clip-level prediction from window-level outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Ensembled {
    /// Mean probabilities and their argmax (lowest index on ties).
    Class { probs: Vec<f64>, class: usize },
    /// Mean of the window outputs.
    Values(Vec<f64>),
}

/// Average window outputs. Classification inputs are probability vectors.
pub fn window_ensemble(windows: &[Vec<f64>], task: Task) -> Result<Ensembled> {
    let first = windows.first().ok_or_else(|| Error::invalid("no windows to ensemble"))?;
    if windows.iter().any(|w| w.len() != first.len()) {
        return Err(Error::invalid("window outputs differ in length"));
    }
    let mut mean = vec![0.0; first.len()];
    for w in windows {
        for (m, v) in mean.iter_mut().zip(w) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= windows.len() as f64);
    if task.is_classification() {
        let class = argmax(&mean);
        Ok(Ensembled::Class { probs: mean, class })
    } else {
        Ok(Ensembled::Values(mean))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
