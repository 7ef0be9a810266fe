use ndarray::{Array2, Axis};
use rand::Rng;

use super::{Target, Task};
use crate::nn::{log_softmax_rows, Dense, Params};

/// Targets in the dense form each objective consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoded {
    /// Multi-hot tag matrix, for per-tag logistic loss.
    MultiHot(Array2<f64>),
    /// Class indices, for softmax cross-entropy.
    Classes(Vec<usize>),
    /// Real targets, for mean squared error.
    Real(Array2<f64>),
}

impl Encoded {
    pub fn new(targets: &[Target], task: Task) -> Self {
        let n = targets.len();
        match task {
            Task::Tagging => {
                let mut y = Array2::zeros((n, task.n_outputs()));
                for (i, t) in targets.iter().enumerate() {
                    if let Target::Tags(tags) = t {
                        for &j in tags {
                            y[[i, j]] = 1.0;
                        }
                    }
                }
                Encoded::MultiHot(y)
            }
            Task::Genre | Task::Key => Encoded::Classes(
                targets
                    .iter()
                    .map(|t| match t {
                        Target::Class(c) => *c,
                        Target::Key(k) => k.index(),
                        _ => 0,
                    })
                    .collect(),
            ),
            Task::Emotion => {
                let mut y = Array2::zeros((n, 2));
                for (i, t) in targets.iter().enumerate() {
                    if let Target::Emotion { arousal, valence } = t {
                        y[[i, 0]] = *arousal;
                        y[[i, 1]] = *valence;
                    }
                }
                Encoded::Real(y)
            }
        }
    }

    pub fn rows(&self, idx: &[usize]) -> Self {
        match self {
            Encoded::MultiHot(y) => Encoded::MultiHot(y.select(Axis(0), idx)),
            Encoded::Classes(c) => Encoded::Classes(idx.iter().map(|&i| c[i]).collect()),
            Encoded::Real(y) => Encoded::Real(y.select(Axis(0), idx)),
        }
    }
}

/// Linear map, or affine → ReLU → dropout → affine.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeNet {
    pub first: Dense,
    pub second: Option<Dense>,
}

impl Params for ProbeNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.first.tensors().to_vec();
        if let Some(s) = &self.second {
            v.extend(s.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.first.tensors_mut().into_iter().collect();
        if let Some(s) = &mut self.second {
            v.extend(s.tensors_mut());
        }
        v
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl ProbeNet {
    pub fn linear<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            first: Dense::new(rng, inputs, outputs, 1.0 / (inputs as f64).sqrt()),
            second: None,
        }
    }

    pub fn mlp<R: Rng>(rng: &mut R, inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            first: Dense::new(rng, inputs, hidden, (2.0 / inputs as f64).sqrt()),
            second: Some(Dense::new(rng, hidden, outputs, 1.0 / (hidden as f64).sqrt())),
        }
    }

    /// Raw outputs (logits or regression values), dropout off.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let h = self.first.forward(x);
        match &self.second {
            Some(s) => s.forward(&h.mapv(|v| v.max(0.0))),
            None => h,
        }
    }

    /// Outputs mapped to probabilities (tagging: sigmoid; classes: softmax).
    pub fn predict(&self, x: &Array2<f64>, task: Task) -> Array2<f64> {
        let z = self.forward(x);
        match task {
            Task::Tagging => z.mapv(sigmoid),
            Task::Genre | Task::Key => log_softmax_rows(&z).mapv(f64::exp),
            Task::Emotion => z,
        }
    }

    /// Task loss plus `l2 · Σ w²` over weight matrices, and its gradient.
    /// `mask` is an inverted-dropout mask on the hidden layer (mlp only).
    pub fn loss_and_grads(&self, x: &Array2<f64>, y: &Encoded, l2: f64, mask: Option<&Array2<f64>>) -> (f64, ProbeNet) {
        let pre = self.first.forward(x);
        let hidden = self.second.as_ref().map(|_| {
            let mut h = pre.mapv(|v| v.max(0.0));
            if let Some(m) = mask {
                h *= m;
            }
            h
        });
        let z = match (&self.second, &hidden) {
            (Some(s), Some(h)) => s.forward(h),
            _ => pre.clone(),
        };
        let n = x.nrows() as f64;
        let (mut loss, dz) = match y {
            Encoded::MultiHot(t) => {
                let count = t.len() as f64;
                let loss = z.iter().zip(t).map(|(&zi, &ti)| softplus(zi) - ti * zi).sum::<f64>() / count;
                (loss, (z.mapv(sigmoid) - t) / count)
            }
            Encoded::Classes(c) => {
                let logp = log_softmax_rows(&z);
                let loss = -c.iter().enumerate().map(|(i, &k)| logp[[i, k]]).sum::<f64>() / n;
                let mut dz = logp.mapv(f64::exp);
                for (i, &k) in c.iter().enumerate() {
                    dz[[i, k]] -= 1.0;
                }
                (loss, dz / n)
            }
            Encoded::Real(t) => {
                let diff = &z - t;
                let count = t.len() as f64;
                (diff.mapv(|v| v * v).sum() / count, diff * (2.0 / count))
            }
        };
        let mut g = self.clone();
        g.zero();
        match (&self.second, hidden) {
            (Some(s), Some(h)) => {
                let mut dh = s.backward(&h, &dz, g.second.as_mut().expect("mlp"));
                if let Some(m) = mask {
                    dh *= m;
                }
                let dpre = dh * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.first.backward(x, &dpre, &mut g.first);
            }
            _ => {
                self.first.backward(x, &dz, &mut g.first);
            }
        }
        if l2 > 0.0 {
            loss += l2 * self.first.w.mapv(|v| v * v).sum();
            g.first.w.scaled_add(2.0 * l2, &self.first.w);
            if let (Some(s), Some(gs)) = (&self.second, g.second.as_mut()) {
                loss += l2 * s.w.mapv(|v| v * v).sum();
                gs.w.scaled_add(2.0 * l2, &s.w);
            }
        }
        (loss, g)
    }
}
