//! Causal transformer decoder over codec tokens, with a four-token
//! conditioning header and per-layer activation capture.

mod block;
mod train;

pub use block::{Block, BlockCache};
pub use train::{lm_train, lm_train_from, perplexity, LmSequence, LmStep, LmTrace};

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_rows, normal_matrix, slice, slice_mut, Dense, LayerNorm, LayerNormCache, Params};
use crate::rng;

/// Number of reserved tokens prepended to every sequence.
pub const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    /// Audio-code vocabulary K.
    pub vocab: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Maximum audio tokens per forward pass (the header comes on top).
    pub context: usize,
    pub mlp_ratio: usize,
    pub n_genres: usize,
    pub n_artists: usize,
    pub n_length_buckets: usize,
    pub n_offset_buckets: usize,
    /// Tokens per length/offset bucket.
    pub bucket_tokens: usize,
    /// Codes per second of the codec feeding this model.
    pub code_rate: f64,
    pub init_std: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine learning-rate decay to zero over the requested steps.
    pub cosine_decay: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            layers: 4,
            d_model: 64,
            heads: 4,
            context: 128,
            mlp_ratio: 4,
            n_genres: 16,
            n_artists: 64,
            n_length_buckets: 16,
            n_offset_buckets: 16,
            bucket_tokens: 625,
            code_rate: 62.5,
            init_std: 0.02,
            batch_size: 8,
            learning_rate: 1e-3,
            cosine_decay: false,
        }
    }
}

impl LmConfig {
    /// Full-scale reference dimensions (never instantiated here).
    pub fn reference() -> Self {
        Self {
            vocab: 2048,
            layers: 72,
            d_model: 4800,
            heads: 8,
            context: 8192,
            code_rate: 44_100.0 / 128.0,
            ..Self::default()
        }
    }

    pub fn reserved_tokens(&self) -> usize {
        self.n_genres + self.n_artists + self.n_length_buckets + self.n_offset_buckets
    }

    pub fn input_vocab(&self) -> usize {
        self.vocab + self.reserved_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.layers == 0 || self.context == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("lm needs vocab >= 2 and positive layers, context, mlp_ratio"));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid("d_model must be a positive multiple of heads"));
        }
        if self.n_genres == 0 || self.n_artists == 0 || self.n_length_buckets == 0 || self.n_offset_buckets == 0 {
            return Err(Error::invalid("every header slot needs at least one token"));
        }
        if self.bucket_tokens == 0 || !(self.code_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("bucket_tokens, code_rate and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Metadata prefix. Id 0 means unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningHeader {
    pub genre_id: usize,
    pub artist_id: usize,
    /// Song length, in tokens.
    pub total_length: usize,
    /// Start of this window within the song, in tokens.
    pub offset: usize,
}

impl ConditioningHeader {
    /// Unknown genre and artist, a one-minute song, zero offset.
    pub fn placeholder(code_rate: f64) -> Self {
        Self {
            genre_id: 0,
            artist_id: 0,
            total_length: (60.0 * code_rate).round() as usize,
            offset: 0,
        }
    }

    pub fn tokens(&self, config: &LmConfig) -> [u32; HEADER_LEN] {
        let k = config.vocab;
        let g = config.n_genres;
        let a = config.n_artists;
        let nl = config.n_length_buckets;
        let bucket = |v: usize, n: usize| (v / config.bucket_tokens).min(n - 1);
        [
            (k + self.genre_id.min(g - 1)) as u32,
            (k + g + self.artist_id.min(a - 1)) as u32,
            (k + g + a + bucket(self.total_length, nl)) as u32,
            (k + g + a + nl + bucket(self.offset, config.n_offset_buckets)) as u32,
        ]
    }
}

/// Post-block residual-stream activations for the captured layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    /// 1-based layer numbers, in capture order.
    pub layers: Vec<usize>,
    /// One `[HEADER_LEN + T, d]` matrix per captured layer.
    pub activations: Vec<Array2<f64>>,
}

impl ActivationStack {
    /// Rows belonging to audio tokens (the header rows dropped).
    pub fn audio_rows(&self, i: usize) -> ndarray::ArrayView2<'_, f64> {
        self.activations[i].slice(s![HEADER_LEN.., ..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Dense,
}

impl Params for LanguageModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![slice(&self.tok_emb), slice(&self.pos_emb)];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend(self.ln_f.tensors());
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![slice_mut(&mut self.tok_emb), slice_mut(&mut self.pos_emb)];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend(self.ln_f.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

/// Everything `backward` needs from a training forward pass.
struct Tape {
    tokens: Vec<u32>,
    caches: Vec<BlockCache>,
    ln_f: LayerNormCache,
    final_norm: Array2<f64>,
}

/// Loss and parameter gradients for one sequence.
pub struct LmPass {
    pub loss: f64,
    pub targets: usize,
    pub grads: LanguageModel,
    /// dL/dlogits; rows of conditioning positions are exactly zero.
    pub logit_grads: Array2<f64>,
}

impl LanguageModel {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut g = rng::stream(seed, "lm-init");
        let std = config.init_std;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let tok_emb = normal_matrix(&mut g, config.input_vocab(), config.d_model, std);
        let pos_emb = normal_matrix(&mut g, config.context + HEADER_LEN, config.d_model, std);
        let blocks = (0..config.layers)
            .map(|_| Block::new(&mut g, config.d_model, config.heads, config.mlp_ratio, std, resid_std))
            .collect();
        let head = Dense::new(&mut g, config.d_model, config.vocab, std);
        Ok(Self {
            ln_f: LayerNorm::new(config.d_model),
            tok_emb,
            pos_emb,
            blocks,
            head,
            config,
        })
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn num_params(&self) -> usize {
        Params::num_params(self)
    }

    /// Header followed by audio codes, validated against the config.
    pub fn input_tokens(&self, codes: &[u32], header: Option<&ConditioningHeader>) -> Result<Vec<u32>> {
        if codes.len() > self.config.context {
            return Err(Error::ContextOverflow {
                len: codes.len(),
                max: self.config.context,
            });
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= self.config.vocab) {
            return Err(Error::CodeOutOfRange {
                code: c,
                vocab: self.config.vocab,
            });
        }
        let header = header.copied().unwrap_or_else(|| ConditioningHeader::placeholder(self.config.code_rate));
        let mut tokens = header.tokens(&self.config).to_vec();
        tokens.extend_from_slice(codes);
        Ok(tokens)
    }

    fn embed(&self, tokens: &[u32]) -> Array2<f64> {
        let mut x = Array2::zeros((tokens.len(), self.config.d_model));
        for (t, (mut row, &tok)) in x.rows_mut().into_iter().zip(tokens).enumerate() {
            row.assign(&(&self.tok_emb.row(tok as usize) + &self.pos_emb.row(t)));
        }
        x
    }

    /// Logits over the K audio codes at every position, plus the requested
    /// post-block activations (1-based layer numbers).
    pub fn forward(
        &self,
        codes: &[u32],
        header: Option<&ConditioningHeader>,
        capture: &[usize],
    ) -> Result<(Array2<f64>, ActivationStack)> {
        if let Some(&l) = capture.iter().find(|&&l| l == 0 || l > self.layers()) {
            return Err(Error::invalid(format!("layer {l} outside 1..={}", self.layers())));
        }
        let tokens = self.input_tokens(codes, header)?;
        let mut x = self.embed(&tokens);
        let mut stack = ActivationStack {
            layers: capture.to_vec(),
            activations: vec![Array2::zeros((0, 0)); capture.len()],
        };
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x);
            for (slot, _) in capture.iter().enumerate().filter(|(_, &l)| l == i + 1) {
                stack.activations[slot] = x.clone();
            }
        }
        let logits = self.head.forward(&self.ln_f.apply(&x));
        Ok((logits, stack))
    }

    /// Mean next-token cross-entropy over audio targets.
    pub fn loss(&self, codes: &[u32], header: Option<&ConditioningHeader>) -> Result<f64> {
        let (logits, _) = self.forward(codes, header, &[])?;
        let (sum, n) = cross_entropy_sum(&logits, &self.input_tokens(codes, header)?);
        Ok(sum / n.max(1) as f64)
    }

    /// Cross-entropy and gradients for one sequence. The loss covers only
    /// positions whose target is an audio code.
    pub fn loss_and_grads(&self, codes: &[u32], header: Option<&ConditioningHeader>) -> Result<LmPass> {
        if codes.is_empty() {
            return Err(Error::EmptyCodes);
        }
        let tokens = self.input_tokens(codes, header)?;
        let mut x = self.embed(&tokens);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward_train(&x);
            caches.push(cache);
            x = y;
        }
        let (final_norm, ln_f) = self.ln_f.forward(&x);
        let logits = self.head.forward(&final_norm);
        let tape = Tape {
            tokens,
            caches,
            ln_f,
            final_norm,
        };

        let logp = log_softmax_rows(&logits);
        let n_targets = codes.len();
        let mut dlogits = Array2::zeros(logits.dim());
        let mut loss = 0.0;
        for t in HEADER_LEN - 1..tape.tokens.len() - 1 {
            let target = tape.tokens[t + 1] as usize;
            loss -= logp[[t, target]];
            let mut row = dlogits.row_mut(t);
            row.assign(&logp.row(t).mapv(f64::exp));
            row[target] -= 1.0;
        }
        dlogits /= n_targets as f64;
        let grads = self.backward(&tape, &dlogits);
        Ok(LmPass {
            loss: loss / n_targets as f64,
            targets: n_targets,
            grads,
            logit_grads: dlogits,
        })
    }

    fn backward(&self, tape: &Tape, dlogits: &Array2<f64>) -> LanguageModel {
        let mut g = self.clone();
        g.zero();
        let dnorm = self.head.backward(&tape.final_norm, dlogits, &mut g.head);
        let mut dx = self.ln_f.backward(&tape.ln_f, &dnorm, &mut g.ln_f);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&tape.caches[i], &dx, &mut g.blocks[i]);
        }
        for (t, (&tok, drow)) in tape.tokens.iter().zip(dx.rows()).enumerate() {
            let mut e = g.tok_emb.row_mut(tok as usize);
            e += &drow;
            let mut p = g.pos_emb.row_mut(t);
            p += &drow;
        }
        g
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let tensors = self
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| Tensor::new(format!("param.{i}"), vec![t.len()], t.to_vec()))
            .collect();
        Ok(Checkpoint {
            kind: "lm".into(),
            config_json: serde_json::to_string(&self.config)?,
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("lm")?;
        let config: LmConfig = serde_json::from_str(&ckpt.config_json)?;
        let mut model = Self::new(config, 0)?;
        ckpt.fill(model.tensors_mut())?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Sum of next-token cross-entropies over audio targets, and their count.
pub(crate) fn cross_entropy_sum(logits: &Array2<f64>, tokens: &[u32]) -> (f64, usize) {
    let logp = log_softmax_rows(logits);
    let mut sum = 0.0;
    let mut n = 0;
    for t in HEADER_LEN - 1..tokens.len().saturating_sub(1) {
        sum -= logp[[t, tokens[t + 1] as usize]];
        n += 1;
    }
    (sum, n)
}

/// Mean of a layer's activations over audio positions.
pub fn mean_pool(stack: &ActivationStack, i: usize) -> Array1<f64> {
    let rows = stack.audio_rows(i);
    rows.sum_axis(ndarray::Axis(0)) / rows.nrows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;

    fn toy(layers: usize, vocab: usize) -> LmConfig {
        LmConfig {
            vocab,
            layers,
            d_model: 8,
            heads: 2,
            context: 16,
            n_genres: 2,
            n_artists: 2,
            n_length_buckets: 2,
            n_offset_buckets: 2,
            init_std: 0.3,
            ..LmConfig::default()
        }
    }

    #[test]
    fn shapes() {
        let m = LanguageModel::new(toy(2, 4), 1).unwrap();
        let codes = [0, 1, 2, 3, 3, 2, 1];
        let (logits, stack) = m.forward(&codes, None, &[1, 2]).unwrap();
        assert_eq!(logits.dim(), (HEADER_LEN + 7, 4));
        assert_eq!(stack.activations.len(), 2);
        assert_eq!(stack.audio_rows(1).dim(), (7, 8));
        assert!(matches!(m.forward(&[0; 17], None, &[]), Err(Error::ContextOverflow { .. })));
        assert!(matches!(m.forward(&[4], None, &[]), Err(Error::CodeOutOfRange { .. })));
        assert!(m.forward(&[1], None, &[3]).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = LanguageModel::new(toy(2, 4), 2).unwrap();
        m.head.w.fill(0.0);
        let ce = m.loss(&[0, 1, 2, 3, 0, 1], None).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn future_tokens_never_affect_past_logits() {
        let m = LanguageModel::new(toy(2, 4), 3).unwrap();
        let codes: Vec<u32> = (0..16).map(|i| (i * 3 % 4) as u32).collect();
        let (base, _) = m.forward(&codes, None, &[]).unwrap();
        for t in 0..16 {
            let mut c = codes.clone();
            c[t] = (c[t] + 1) % 4;
            let (pert, _) = m.forward(&c, None, &[]).unwrap();
            let p = HEADER_LEN + t;
            let diff = (&pert.slice(s![..p, ..]) - &base.slice(s![..p, ..]))
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert_eq!(diff, 0.0, "position {t}");
            assert_ne!(pert.row(p), base.row(p));
        }
    }

    #[test]
    fn capture_does_not_change_logits() {
        let m = LanguageModel::new(toy(3, 5), 4).unwrap();
        let codes = [4, 0, 2, 2, 1];
        let (a, _) = m.forward(&codes, None, &[]).unwrap();
        let (b, _) = m.forward(&codes, None, &[1, 2, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = LanguageModel::new(toy(1, 4), 5).unwrap();
        let codes = [0, 3, 1, 1, 2, 0, 3];
        let pass = m.loss_and_grads(&codes, None).unwrap();
        assert!((pass.loss - m.loss(&codes, None).unwrap()).abs() < 1e-12);
        let err = gradcheck::max_relative_error(&m, &pass.grads, |q| q.loss(&codes, None).unwrap(), 1e-5, 40);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn prefix_targets_are_masked() {
        let m = LanguageModel::new(toy(2, 4), 6).unwrap();
        let pass = m.loss_and_grads(&[1, 2, 3], None).unwrap();
        for t in 0..HEADER_LEN - 1 {
            assert!(pass.logit_grads.row(t).iter().all(|&v| v == 0.0));
        }
        assert!(pass.logit_grads.row(HEADER_LEN - 1).iter().any(|&v| v != 0.0));
        assert!(pass.logit_grads.row(HEADER_LEN + 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn placeholder_header_equals_none() {
        let m = LanguageModel::new(toy(2, 4), 7).unwrap();
        let ph = ConditioningHeader::placeholder(m.config.code_rate);
        let codes = [1, 0, 3];
        assert_eq!(m.forward(&codes, None, &[2]).unwrap(), m.forward(&codes, Some(&ph), &[2]).unwrap());
        let other = ConditioningHeader { genre_id: 1, ..ph };
        assert_ne!(m.forward(&codes, None, &[]).unwrap().0, m.forward(&codes, Some(&other), &[]).unwrap().0);
    }

    #[test]
    fn header_tokens_are_reserved() {
        let cfg = LmConfig::default();
        let t = ConditioningHeader::placeholder(cfg.code_rate).tokens(&cfg);
        assert!(t.iter().all(|&x| x as usize >= cfg.vocab && (x as usize) < cfg.input_vocab()));
        assert_eq!(t[0] as usize, cfg.vocab);
        assert_eq!(t[2] as usize, cfg.vocab + 16 + 64 + 6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = LanguageModel::new(toy(2, 4), 8).unwrap();
        assert_eq!(LanguageModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap(), m);
    }
}
