use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{ProbeConfig, ProbeModel};
use super::model::{Encoded, ProbeNet};
use super::{window_ensemble, Ensembled, ProbeData, Target, Task, TestSplit, TrainSplit, ValidSplit};
use crate::error::{Error, Result};
use crate::key::KeyLabel;
use crate::metrics;
use crate::nn::{Adam, AdamConfig, Params};
use crate::rng;

pub const MLP_HIDDEN: usize = 512;

/// Early-stopping schedule: evaluate every `eval_every` steps and stop after
/// `patience` evaluations without improvement or at `max_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub eval_every: usize,
    pub patience: usize,
    pub max_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            eval_every: 50,
            patience: 20,
            max_steps: 10_000,
        }
    }
}

/// Per-dimension mean and standard deviation of the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(train: &TrainSplit) -> Self {
        let x = &train.0.x;
        let mean = x.mean_axis(Axis(0)).expect("non-empty split");
        let std = x
            .var_axis(Axis(0), 0.0)
            .mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
        Self { mean, std }
    }

    pub fn identity(dims: usize) -> Self {
        Self {
            mean: Array1::zeros(dims),
            std: Array1::ones(dims),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }
}

/// Scores on one split, all on the 0–100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    /// The task's early-stopping metric.
    pub early_stop: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl TaskScores {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Place this task's test metrics into summary-table columns.
    pub fn fill(&self, task: Task, into: &mut metrics::MetricScores) {
        match task {
            Task::Tagging => {
                into.tagging_auc = self.get("auc");
                into.tagging_ap = self.get("ap");
            }
            Task::Genre => into.genre_accuracy = self.get("accuracy"),
            Task::Key => into.key_weighted = self.get("weighted"),
            Task::Emotion => {
                into.emotion_r2_arousal = self.get("r2_arousal");
                into.emotion_r2_valence = self.get("r2_valence");
            }
        }
    }
}

/// A trained probe with the standardization it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub standardizer: Standardizer,
    pub net: ProbeNet,
}

fn non_finite_as_null<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn null_as_neg_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    #[serde(flatten)]
    pub config: ProbeConfig,
    pub failed: bool,
    /// Best validation early-stop metric; −∞ for a failed config.
    #[serde(serialize_with = "non_finite_as_null", deserialize_with = "null_as_neg_inf")]
    pub val_score: f64,
    pub test: Option<TaskScores>,
    /// Training steps taken when the best validation score was reached.
    pub steps_to_best: usize,
    pub steps_run: usize,
    /// Best-so-far validation score after each evaluation.
    pub trace: Vec<f64>,
    #[serde(skip)]
    pub model: Option<TrainedProbe>,
}

impl ProbeResult {
    pub fn failed(config: ProbeConfig, steps_run: usize) -> Self {
        Self {
            config,
            failed: true,
            val_score: f64::NEG_INFINITY,
            test: None,
            steps_to_best: 0,
            steps_run,
            trace: Vec::new(),
            model: None,
        }
    }
}

fn key_of(t: &Target) -> KeyLabel {
    match t {
        Target::Key(k) => *k,
        _ => unreachable!("validated key schema"),
    }
}

/// Score a probe on `data`: windows of one clip are ensembled first.
pub fn evaluate(probe: &TrainedProbe, data: &ProbeData, task: Task) -> Result<TaskScores> {
    let out = probe.net.predict(&probe.standardizer.apply(&data.x), task);
    let mut order: Vec<usize> = Vec::new();
    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in data.clips.iter().enumerate() {
        let e = rows.entry(c).or_default();
        if e.is_empty() {
            order.push(c);
        }
        e.push(i);
    }
    let mut preds = Vec::with_capacity(order.len());
    let mut truths = Vec::with_capacity(order.len());
    for c in &order {
        let idx = &rows[c];
        let windows: Vec<Vec<f64>> = idx.iter().map(|&i| out.row(i).to_vec()).collect();
        preds.push(window_ensemble(&windows, task)?);
        truths.push(&data.targets[idx[0]]);
    }
    let mut m = BTreeMap::new();
    let early_stop = match task {
        Task::Tagging => {
            let n = preds.len();
            let mut scores = Array2::zeros((n, 50));
            let mut labels = Array2::from_elem((n, 50), false);
            for (i, (p, t)) in preds.iter().zip(&truths).enumerate() {
                if let Ensembled::Values(v) = p {
                    scores.row_mut(i).assign(&Array1::from(v.clone()));
                }
                if let Target::Tags(tags) = t {
                    for &j in tags {
                        labels[[i, j]] = true;
                    }
                }
            }
            let auc = 100.0 * metrics::macro_auc(scores.view(), labels.view())?.value;
            let ap = 100.0 * metrics::macro_ap(scores.view(), labels.view())?.value;
            m.insert("auc".into(), auc);
            m.insert("ap".into(), ap);
            auc
        }
        Task::Genre => {
            let p: Vec<usize> = preds.iter().map(class_of).collect();
            let t: Vec<usize> = truths
                .iter()
                .map(|t| match t {
                    Target::Class(c) => *c,
                    _ => unreachable!("validated genre schema"),
                })
                .collect();
            let acc = metrics::accuracy(&p, &t)?;
            m.insert("accuracy".into(), acc);
            acc
        }
        Task::Key => {
            let p: Vec<KeyLabel> = preds
                .iter()
                .map(|e| KeyLabel::from_index(class_of(e)))
                .collect::<Result<_>>()?;
            let t: Vec<KeyLabel> = truths.iter().map(|t| key_of(t)).collect();
            let weighted = metrics::weighted_key_score(&p, &t)?;
            m.insert("weighted".into(), weighted);
            m.insert("accuracy".into(), metrics::accuracy(&p, &t)?);
            weighted
        }
        Task::Emotion => {
            let mut cols = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
            for (p, t) in preds.iter().zip(&truths) {
                if let (Ensembled::Values(v), Target::Emotion { arousal, valence }) = (p, t) {
                    cols[0].push(v[0]);
                    cols[1].push(v[1]);
                    cols[2].push(*arousal);
                    cols[3].push(*valence);
                }
            }
            let a = 100.0 * metrics::r_squared(&cols[0], &cols[2])?;
            let v = 100.0 * metrics::r_squared(&cols[1], &cols[3])?;
            m.insert("r2_arousal".into(), a);
            m.insert("r2_valence".into(), v);
            (a + v) / 2.0
        }
    };
    Ok(TaskScores { early_stop, metrics: m })
}

fn class_of(e: &Ensembled) -> usize {
    match e {
        Ensembled::Class { class, .. } => *class,
        Ensembled::Values(v) => super::argmax(v),
    }
}

fn check_dims(train: &TrainSplit, valid: &ValidSplit, test: Option<&TestSplit>) -> Result<()> {
    let d = train.0.dims();
    for other in [Some(&valid.0), test.map(|t| &t.0)].into_iter().flatten() {
        if other.dims() != d {
            return Err(Error::invalid(format!("feature dims differ: {d} vs {}", other.dims())));
        }
    }
    Ok(())
}

/// Train one probe with early stopping on the validation split.
///
/// Returns the parameters of the best validation evaluation (the initial
/// model counts as evaluation zero). Divergence yields a failed result.
pub fn train_probe(
    train: &TrainSplit,
    valid: &ValidSplit,
    test: Option<&TestSplit>,
    task: Task,
    config: &ProbeConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<ProbeResult> {
    check_dims(train, valid, test)?;
    let standardizer = if config.standardize {
        Standardizer::fit(train)
    } else {
        Standardizer::identity(train.0.dims())
    };
    let x = standardizer.apply(&train.0.x);
    let y = Encoded::new(&train.0.targets, task);
    let n = x.nrows();
    let mut rng = rng::stream(seed, "probe");
    let net = match config.model {
        ProbeModel::Linear => ProbeNet::linear(&mut rng, x.ncols(), task.n_outputs()),
        ProbeModel::Mlp512 => ProbeNet::mlp(&mut rng, x.ncols(), MLP_HIDDEN, task.n_outputs()),
    };
    let mut probe = TrainedProbe { standardizer, net };
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        &probe.net,
    );
    let batch = config.batch_size.clamp(1, n);
    let keep = 1.0 - config.dropout;
    let eval_every = schedule.eval_every.max(1);

    let mut best_score = evaluate(&probe, &valid.0, task)?.early_stop;
    if !best_score.is_finite() {
        return Ok(ProbeResult::failed(*config, 0));
    }
    let mut best = probe.clone();
    let mut steps_to_best = 0;
    let mut trace = vec![best_score];
    let mut stale = 0;
    let mut order: Vec<usize> = Vec::new();
    let mut step = 0;
    while step < schedule.max_steps && stale < schedule.patience {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..n).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let xb = x.select(Axis(0), &idx);
        let yb = y.rows(&idx);
        let mask = (config.model == ProbeModel::Mlp512).then(|| {
            Array2::from_shape_simple_fn((batch, MLP_HIDDEN), || {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        });
        let (loss, grad) = probe.net.loss_and_grads(&xb, &yb, config.l2, mask.as_ref());
        if !loss.is_finite() || !grad.all_finite() {
            log::warn!("probe config {config:?} diverged at step {step}");
            return Ok(ProbeResult::failed(*config, step));
        }
        opt.step(&mut probe.net, &grad);
        step += 1;
        if step % eval_every == 0 || step == schedule.max_steps {
            if !probe.net.all_finite() {
                return Ok(ProbeResult::failed(*config, step));
            }
            let score = evaluate(&probe, &valid.0, task)?.early_stop;
            if score > best_score {
                best_score = score;
                best = probe.clone();
                steps_to_best = step;
                stale = 0;
            } else {
                stale += 1;
            }
            trace.push(best_score);
        }
    }
    let test = test.map(|t| evaluate(&best, &t.0, task)).transpose()?;
    Ok(ProbeResult {
        config: *config,
        failed: false,
        val_score: best_score,
        test,
        steps_to_best,
        steps_run: step,
        trace,
        model: Some(best),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_matrix;

    fn config(model: ProbeModel, lr: f64) -> ProbeConfig {
        ProbeConfig {
            standardize: true,
            model,
            batch_size: 64,
            learning_rate: lr,
            dropout: 0.25,
            l2: 0.0,
        }
    }

    /// Genre classes separated along the first two dims.
    fn separable(n: usize, seed: u64) -> ProbeData {
        let mut g = rng::from_seed(seed);
        let mut x = normal_matrix(&mut g, n, 4, 0.1);
        let mut t = Vec::new();
        for i in 0..n {
            let c = i % 2;
            x[[i, 0]] += if c == 0 { 3.0 } else { -3.0 };
            t.push(Target::Class(c));
        }
        ProbeData::new(x, t, (0..n).collect(), Task::Genre).unwrap()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let train = TrainSplit(separable(40, 1));
        let valid = ValidSplit(separable(20, 2));
        let test = TestSplit(separable(20, 3));
        let r = train_probe(&train, &valid, Some(&test), Task::Genre, &config(ProbeModel::Linear, 1e-2), &Schedule::default(), 7).unwrap();
        assert!(!r.failed);
        assert_eq!(r.val_score, 100.0);
        assert_eq!(r.test.unwrap().get("accuracy"), Some(100.0));
        assert!(r.trace.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn deterministic_per_seed() {
        let train = TrainSplit(separable(40, 4));
        let valid = ValidSplit(separable(20, 5));
        let s = Schedule {
            eval_every: 5,
            patience: 3,
            max_steps: 60,
        };
        let c = config(ProbeModel::Mlp512, 1e-3);
        let a = train_probe(&train, &valid, None, Task::Genre, &c, &s, 3).unwrap();
        let b = train_probe(&train, &valid, None, Task::Genre, &c, &s, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_marks_config_failed() {
        let mut data = separable(40, 6);
        data.x *= 1e10;
        let train = TrainSplit(data);
        let valid = ValidSplit(separable(20, 7));
        let mut c = config(ProbeModel::Linear, 1e300);
        c.standardize = false;
        let r = train_probe(&train, &valid, None, Task::Genre, &c, &Schedule::default(), 1).unwrap();
        assert!(r.failed);
        assert_eq!(r.val_score, f64::NEG_INFINITY);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"val_score\":null"), "{json}");
    }

    #[test]
    fn standardizer_uses_train_statistics() {
        let x = ndarray::array![[1.0, 5.0], [3.0, 5.0]];
        let train = TrainSplit(ProbeData::new(x, vec![Target::Class(0), Target::Class(1)], vec![0, 1], Task::Genre).unwrap());
        let s = Standardizer::fit(&train);
        assert_eq!(s.mean.to_vec(), vec![2.0, 5.0]);
        assert_eq!(s.std.to_vec(), vec![1.0, 1.0]);
        assert_eq!(s.apply(&ndarray::array![[4.0, 6.0]]), ndarray::array![[2.0, 1.0]]);
    }

    #[test]
    fn key_windows_are_ensembled() {
        let major = |t| Target::Key(KeyLabel::from_index(t).unwrap());
        let x = ndarray::array![[1.0], [1.0], [-1.0]];
        let data = ProbeData::new(x, vec![major(0), major(0), major(1)], vec![0, 0, 1], Task::Key).unwrap();
        let net = ProbeNet {
            first: crate::nn::Dense::zeros(1, 24),
            second: None,
        };
        let mut probe = TrainedProbe {
            standardizer: Standardizer::identity(1),
            net,
        };
        probe.net.first.w[[0, 0]] = 1.0;
        probe.net.first.w[[0, 1]] = -1.0;
        let s = evaluate(&probe, &data, Task::Key).unwrap();
        assert_eq!(s.get("accuracy"), Some(100.0));
        assert_eq!(s.early_stop, 100.0);
    }
}
