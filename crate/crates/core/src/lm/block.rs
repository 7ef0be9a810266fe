use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::nn::{gelu, gelu_grad, Dense, LayerNorm, LayerNormCache};

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Dense,
    pub proj: Dense,
    pub ln2: LayerNorm,
    pub fc1: Dense,
    pub fc2: Dense,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LayerNormCache,
    m: Array2<f64>,
    hpre: Array2<f64>,
    hact: Array2<f64>,
}

/// Row-wise softmax of `scores` restricted to `j <= i`; masked entries are exactly 0.
fn causal_softmax(mut scores: Array2<f64>) -> Array2<f64> {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.slice_mut(s![..=i]).mapv_inplace(|v| v / sum);
    }
    scores
}

impl Block {
    pub fn new<R: Rng>(rng: &mut R, d: usize, heads: usize, mlp_ratio: usize, std: f64, resid_std: f64) -> Self {
        Self {
            heads,
            ln1: LayerNorm::new(d),
            qkv: Dense::new(rng, d, 3 * d, std),
            proj: Dense::new(rng, d, d, resid_std),
            ln2: LayerNorm::new(d),
            fc1: Dense::new(rng, d, mlp_ratio * d, std),
            fc2: Dense::new(rng, mlp_ratio * d, d, resid_std),
        }
    }

    fn dim(&self) -> usize {
        self.proj.outputs()
    }

    fn attention(&self, qkv: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qkv.nrows(), d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = causal_softmax(q.dot(&k.t()) * scale);
            out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        (out, probs)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let a = self.ln1.apply(x);
        let (attn, _) = self.attention(&self.qkv.forward(&a));
        let x1 = x + &self.proj.forward(&attn);
        let m = self.ln2.apply(&x1);
        let h = self.fc1.forward(&m).mapv(gelu);
        x1 + self.fc2.forward(&h)
    }

    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (a, ln1) = self.ln1.forward(x);
        let qkv = self.qkv.forward(&a);
        let (attn, probs) = self.attention(&qkv);
        let x1 = x + &self.proj.forward(&attn);
        let (m, ln2) = self.ln2.forward(&x1);
        let hpre = self.fc1.forward(&m);
        let hact = hpre.mapv(gelu);
        let y = &x1 + &self.fc2.forward(&hact);
        (
            y,
            BlockCache {
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                m,
                hpre,
                hact,
            },
        )
    }

    pub fn backward(&self, c: &BlockCache, dy: &Array2<f64>, g: &mut Block) -> Array2<f64> {
        // MLP branch
        let dh = self.fc2.backward(&c.hact, dy, &mut g.fc2) * &c.hpre.mapv(gelu_grad);
        let dm = self.fc1.backward(&c.m, &dh, &mut g.fc1);
        let dx1 = dy + &self.ln2.backward(&c.ln2, &dm, &mut g.ln2);

        // attention branch
        let dattn = self.proj.backward(&c.attn, &dx1, &mut g.proj);
        let d = self.dim();
        let dh_ = d / self.heads;
        let scale = 1.0 / (dh_ as f64).sqrt();
        let mut dqkv = Array2::zeros(c.qkv.dim());
        for h in 0..self.heads {
            let (qs, ks, vs) = (h * dh_, d + h * dh_, 2 * d + h * dh_);
            let q = c.qkv.slice(s![.., qs..qs + dh_]);
            let k = c.qkv.slice(s![.., ks..ks + dh_]);
            let v = c.qkv.slice(s![.., vs..vs + dh_]);
            let p = &c.probs[h];
            let dout = dattn.slice(s![.., h * dh_..(h + 1) * dh_]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * p * scale;
            dqkv.slice_mut(s![.., qs..qs + dh_]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., ks..ks + dh_]).assign(&ds.t().dot(&q));
            dqkv.slice_mut(s![.., vs..vs + dh_]).assign(&dv);
        }
        let da = self.qkv.backward(&c.a, &dqkv, &mut g.qkv);
        dx1 + self.ln1.backward(&c.ln1, &da, &mut g.ln1)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(12);
        v.extend(self.ln1.tensors());
        v.extend(self.qkv.tensors());
        v.extend(self.proj.tensors());
        v.extend(self.ln2.tensors());
        v.extend(self.fc1.tensors());
        v.extend(self.fc2.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(12);
        v.extend(self.ln1.tensors_mut());
        v.extend(self.qkv.tensors_mut());
        v.extend(self.proj.tensors_mut());
        v.extend(self.ln2.tensors_mut());
        v.extend(self.fc1.tensors_mut());
        v.extend(self.fc2.tensors_mut());
        v
    }
}

impl crate::nn::Params for Block {
    fn tensors(&self) -> Vec<&[f64]> {
        Block::tensors(self)
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        Block::tensors_mut(self)
    }
}
