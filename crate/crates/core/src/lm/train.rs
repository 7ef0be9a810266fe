use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy_sum, ConditioningHeader, LanguageModel, LmConfig};
use crate::codec::CodeSequence;
use crate::error::{Error, Result};
use crate::nn::{sum_ordered, Adam, AdamConfig, Params};
use crate::{par, rng};

/// Training/evaluation sequence: codes plus an optional header
/// (`None` means the placeholder header).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmSequence {
    pub codes: Vec<u32>,
    pub header: Option<ConditioningHeader>,
}

impl From<CodeSequence> for LmSequence {
    fn from(c: CodeSequence) -> Self {
        Self {
            codes: c.codes,
            header: None,
        }
    }
}

impl From<Vec<u32>> for LmSequence {
    fn from(codes: Vec<u32>) -> Self {
        Self { codes, header: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmStep {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LmTrace {
    pub steps: Vec<LmStep>,
}

/// Train a freshly initialized model on next-token prediction.
pub fn lm_train(corpus: &[LmSequence], config: &LmConfig, steps: usize, seed: u64) -> Result<(LanguageModel, LmTrace)> {
    let model = LanguageModel::new(config.clone(), seed)?;
    lm_train_from(model, corpus, steps, seed)
}

/// Random window of at most `context` codes from a random sequence.
fn window<'a, R: Rng>(corpus: &'a [LmSequence], context: usize, rng: &mut R) -> (&'a [u32], Option<ConditioningHeader>) {
    let seq = &corpus[rng.random_range(0..corpus.len())];
    if seq.codes.len() <= context {
        return (&seq.codes, seq.header);
    }
    let start = rng.random_range(0..=seq.codes.len() - context);
    let header = seq.header.map(|h| ConditioningHeader { offset: h.offset + start, ..h });
    (&seq.codes[start..start + context], header)
}

pub fn lm_train_from(
    mut model: LanguageModel,
    corpus: &[LmSequence],
    steps: usize,
    seed: u64,
) -> Result<(LanguageModel, LmTrace)> {
    let corpus: Vec<LmSequence> = corpus.iter().filter(|s| !s.codes.is_empty()).cloned().collect();
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = model.config.clone();
    if let Some(&c) = corpus.iter().flat_map(|s| &s.codes).find(|&&c| c as usize >= cfg.vocab) {
        return Err(Error::CodeOutOfRange { code: c, vocab: cfg.vocab });
    }
    let mut rng = rng::stream(seed, "lm-train");
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        },
        &model,
    );
    let mut trace = LmTrace::default();
    for step in 0..steps {
        let lr = if cfg.cosine_decay {
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
        } else {
            cfg.learning_rate
        };
        opt.set_lr(lr);
        let batch: Vec<_> = (0..cfg.batch_size).map(|_| window(&corpus, cfg.context, &mut rng)).collect();
        let m = &model;
        let passes = par::map(&batch, |(codes, header)| m.loss_and_grads(codes, header.as_ref()));
        let passes = passes.into_iter().collect::<Result<Vec<_>>>()?;
        let b = passes.len() as f64;
        let loss = passes.iter().map(|p| p.loss).sum::<f64>() / b;
        let grads: Vec<LanguageModel> = passes.into_iter().map(|p| p.grads).collect();
        let mut grad = sum_ordered(&grads).expect("non-empty batch");
        grad.scale(1.0 / b);
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged {
                stage: "train-lm",
                step,
                detail: format!("loss {loss}"),
            });
        }
        let grad_norm = opt.step(&mut model, &grad);
        log::debug!("lm step {step}: loss {loss:.4}");
        trace.steps.push(LmStep {
            step,
            loss,
            grad_norm,
            lr,
        });
    }
    Ok((model, trace))
}

/// Mean next-token cross-entropy (nats/token) over all audio positions.
/// Sequences longer than the context are scored window by window.
pub fn perplexity(model: &LanguageModel, corpus: &[LmSequence]) -> Result<f64> {
    let ctx = model.config.context;
    let windows: Vec<(&[u32], Option<ConditioningHeader>)> = corpus
        .iter()
        .flat_map(|s| {
            s.codes.chunks(ctx).enumerate().map(move |(i, c)| {
                let header = s.header.map(|h| ConditioningHeader {
                    offset: h.offset + i * ctx,
                    ..h
                });
                (c, header)
            })
        })
        .collect();
    if windows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let parts = par::map(&windows, |(codes, header)| -> Result<(f64, usize)> {
        let (logits, _) = model.forward(codes, header.as_ref(), &[])?;
        Ok(cross_entropy_sum(&logits, &model.input_tokens(codes, header.as_ref())?))
    });
    let mut parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    // Sum in value order so the result does not depend on corpus order.
    parts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), p| (s + p.0, n + p.1));
    Ok(sum / n as f64)
}
