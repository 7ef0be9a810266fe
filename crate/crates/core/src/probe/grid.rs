use serde::{Deserialize, Serialize};

use super::train::{train_probe, ProbeResult, Schedule};
use super::{Task, TestSplit, TrainSplit, ValidSplit};
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeModel {
    Linear,
    Mlp512,
}

/// One point of the probe hyperparameter grid. `dropout` only affects mlp512.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub standardize: bool,
    pub model: ProbeModel,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub l2: f64,
}

/// Values enumerated per hyperparameter. The default is the full
/// 2×2×2×3×3×3 = 216 grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridAxes {
    pub standardize: Vec<bool>,
    pub model: Vec<ProbeModel>,
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
    pub l2: Vec<f64>,
}

impl Default for GridAxes {
    fn default() -> Self {
        Self {
            standardize: vec![false, true],
            model: vec![ProbeModel::Linear, ProbeModel::Mlp512],
            batch_size: vec![64, 256],
            learning_rate: vec![1e-5, 1e-4, 1e-3],
            dropout: vec![0.25, 0.5, 0.75],
            l2: vec![0.0, 1e-4, 1e-3],
        }
    }
}

impl GridAxes {
    pub fn len(&self) -> usize {
        self.standardize.len()
            * self.model.len()
            * self.batch_size.len()
            * self.learning_rate.len()
            * self.dropout.len()
            * self.l2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All configs, lexicographic in field order (the last field varies fastest).
    pub fn configs(&self) -> Vec<ProbeConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &standardize in &self.standardize {
            for &model in &self.model {
                for &batch_size in &self.batch_size {
                    for &learning_rate in &self.learning_rate {
                        for &dropout in &self.dropout {
                            for &l2 in &self.l2 {
                                out.push(ProbeConfig {
                                    standardize,
                                    model,
                                    batch_size,
                                    learning_rate,
                                    dropout,
                                    l2,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Every config's result in enumeration order, plus the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub task: Task,
    pub best: usize,
    pub rows: Vec<ProbeResult>,
}

impl GridResult {
    pub fn best(&self) -> &ProbeResult {
        &self.rows[self.best]
    }

    /// One JSON object per line, one line per config.
    pub fn table_records(&self) -> Result<String> {
        let mut out = String::new();
        for (i, r) in self.rows.iter().enumerate() {
            let mut v = serde_json::to_value(r)?;
            if let Some(obj) = v.as_object_mut() {
                obj.insert("index".into(), i.into());
                obj.insert("task".into(), self.task.name().into());
                obj.insert("best".into(), (i == self.best).into());
                obj.remove("trace");
            }
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Run `trainer` on every config (in parallel) with seeds derived from the
/// config index, and pick the best validation score; ties go to the
/// earlier config.
pub fn run_grid<F>(task: Task, configs: &[ProbeConfig], seed: u64, trainer: F) -> Result<GridResult>
where
    F: Fn(&ProbeConfig, u64) -> Result<ProbeResult> + Sync + Send,
{
    let rows = par::map_range(configs.len(), |i| {
        trainer(&configs[i], rng::derive_indexed(seed, "probe-config", i as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.failed || !r.val_score.is_finite() {
            continue;
        }
        if best.is_none_or(|b| r.val_score > rows[b].val_score) {
            best = Some(i);
        }
    }
    let best = best.ok_or(Error::AllConfigsFailed)?;
    Ok(GridResult { task, best, rows })
}

/// Grid search over `axes`. Only the winning row keeps its trained model.
pub fn grid_search(
    train: &TrainSplit,
    valid: &ValidSplit,
    test: Option<&TestSplit>,
    task: Task,
    axes: &GridAxes,
    schedule: &Schedule,
    seed: u64,
) -> Result<GridResult> {
    let configs = axes.configs();
    if configs.is_empty() {
        return Err(Error::invalid("probe grid is empty"));
    }
    let mut grid = run_grid(task, &configs, seed, |c, s| {
        let mut r = train_probe(train, valid, test, task, c, schedule, s)?;
        r.model = None;
        Ok(r)
    })?;
    let best = &configs[grid.best];
    let retrained = train_probe(
        train,
        valid,
        test,
        task,
        best,
        schedule,
        rng::derive_indexed(seed, "probe-config", grid.best as u64),
    )?;
    grid.rows[grid.best].model = retrained.model;
    log::info!(
        "{task}: best config #{} {:?} val {:.3}",
        grid.best,
        best,
        grid.best().val_score
    );
    Ok(grid)
}
