use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Codec, CodecConfig, CodecNet};
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::nn::{sum_ordered, Adam, AdamConfig, Params};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecStep {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    /// Mean squared distance to the selected codes; absent when β = 0.
    pub commitment: Option<f64>,
    pub grad_norm: f64,
    pub codes_in_use: usize,
    pub revived: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecTrace {
    pub steps: Vec<CodecStep>,
}

impl CodecTrace {
    /// Trailing moving average of the reconstruction loss.
    pub fn smoothed_recon(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let recon: Vec<f64> = self.steps.iter().map(|s| s.recon).collect();
        (0..recon.len().saturating_sub(w - 1))
            .map(|i| recon[i..i + w].iter().sum::<f64>() / w as f64)
            .collect()
    }
}

/// Train a freshly initialized codec.
pub fn train_codec(corpus: &[AudioClip], config: &CodecConfig, steps: usize, seed: u64) -> Result<(Codec, CodecTrace)> {
    let codec = Codec::new(config.clone(), seed)?;
    train(codec, corpus, steps, seed)
}

fn crop<R: Rng>(corpus: &[AudioClip], len: usize, rng: &mut R) -> Vec<f64> {
    let clip = &corpus[rng.random_range(0..corpus.len())];
    let mut out = vec![0.0; len];
    if clip.len() <= len {
        out[..clip.len()].copy_from_slice(clip.samples());
    } else {
        let start = rng.random_range(0..=clip.len() - len);
        out.copy_from_slice(&clip.samples()[start..start + len]);
    }
    out
}

/// Continue training `codec` for `steps` mini-batch updates.
///
/// The first update of an untrained codec seeds the codebook from encoder
/// outputs of that batch.
pub fn train(mut codec: Codec, corpus: &[AudioClip], steps: usize, seed: u64) -> Result<(Codec, CodecTrace)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = codec.config.clone();
    if let Some(c) = corpus.iter().find(|c| c.sample_rate() != cfg.sample_rate) {
        return Err(Error::SampleRateMismatch {
            expected: cfg.sample_rate,
            actual: c.sample_rate(),
        });
    }
    let crop_len = cfg.crop_codes * cfg.hop();
    let mut rng = rng::stream(seed, "codec-train");
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        },
        &codec.net,
    );
    let mut trace = CodecTrace::default();

    for step in 0..steps {
        let batch: Vec<Vec<f64>> = (0..cfg.batch_size).map(|_| crop(corpus, crop_len, &mut rng)).collect();

        if codec.trained_steps == 0 {
            let latents: Vec<Array2<f64>> = par::map(&batch, |x| {
                codec.net.encode_latents(&Array2::from_shape_vec((x.len(), 1), x.clone()).expect("column"))
            });
            let all = concatenate(Axis(0), &latents.iter().map(|l| l.view()).collect::<Vec<_>>())
                .map_err(|e| Error::invalid(e.to_string()))?;
            for k in 0..cfg.vocab {
                let pick = rng.random_range(0..all.nrows());
                codec.codebook.vectors.row_mut(k).assign(&all.row(pick));
            }
            codec.codebook.ema_sums = codec.codebook.vectors.clone();
            codec.codebook.ema_counts.fill(1.0);
        }

        let net = &codec.net;
        let cb = &codec.codebook;
        let passes = par::map(&batch, |x| net.loss_and_grads(x, Some(cb), cfg.beta));
        let passes = passes.into_iter().collect::<Result<Vec<_>>>()?;

        let b = passes.len() as f64;
        let recon = passes.iter().map(|p| p.loss.recon).sum::<f64>() / b;
        let commit = passes.iter().map(|p| p.loss.commitment.unwrap_or(0.0)).sum::<f64>() / b;
        let loss = recon + cfg.beta * commit;
        let grads: Vec<CodecNet> = passes.iter().map(|p| p.grads.clone()).collect();
        let mut grad = sum_ordered(&grads).expect("non-empty batch");
        grad.scale(1.0 / b);
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged {
                stage: "train-codec",
                step,
                detail: format!("loss {loss}, reconstruction {recon}"),
            });
        }
        let grad_norm = opt.step(&mut codec.net, &grad);

        let latents = concatenate(Axis(0), &passes.iter().map(|p| p.latents.view()).collect::<Vec<_>>())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let codes: Vec<u32> = passes.iter().flat_map(|p| p.codes.iter().copied()).collect();
        codec.codebook.ema_update(&latents, &codes, cfg.ema_decay);
        let codes_in_use = codec.codebook.codes_in_use(cfg.dead_code_threshold);
        let revived = codec.codebook.revive(&latents, cfg.dead_code_threshold, &mut rng);
        codec.trained_steps += 1;

        trace.steps.push(CodecStep {
            step,
            loss,
            recon,
            commitment: (cfg.beta > 0.0).then_some(commit),
            grad_norm,
            codes_in_use,
            revived,
        });
        log::debug!("codec step {step}: loss {loss:.5} recon {recon:.5} in-use {codes_in_use}");
    }
    Ok((codec, trace))
}

/// Mean squared reconstruction error over clips, weighting every sample equally.
pub fn reconstruction_mse(codec: &Codec, clips: &[AudioClip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_clip = par::map(clips, |c| -> Result<(f64, usize)> {
        let y = codec.reconstruct(c)?;
        let se = y.samples().iter().zip(c.samples()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((se, c.len()))
    });
    let mut total = 0.0;
    let mut n = 0;
    for r in per_clip {
        let (se, len) = r?;
        total += se;
        n += len;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synth_corpus;

    fn small() -> CodecConfig {
        CodecConfig {
            strides: vec![2, 4],
            channels: vec![8, 8],
            latent_dim: 4,
            vocab: 16,
            batch_size: 4,
            crop_codes: 16,
            learning_rate: 3e-3,
            ..CodecConfig::default()
        }
    }

    fn corpus(n: usize) -> Vec<AudioClip> {
        synth_corpus(n, 0.5, 11).into_iter().map(|(c, _)| c).collect()
    }

    #[test]
    fn fixed_seed_gives_identical_trace() {
        let c = corpus(2);
        let (a, ta) = train_codec(&c, &small(), 5, 3).unwrap();
        let (b, tb) = train_codec(&c, &small(), 5, 3).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
    }

    #[test]
    fn commitment_recorded_only_when_beta_positive() {
        let c = corpus(1);
        let (_, with) = train_codec(&c, &small(), 3, 1).unwrap();
        let zero = CodecConfig { beta: 0.0, ..small() };
        let (_, without) = train_codec(&c, &zero, 3, 1).unwrap();
        assert!(with.steps.iter().all(|s| s.commitment.is_some()));
        assert!(without.steps.iter().all(|s| s.commitment.is_none()));
    }

    #[test]
    fn overfits_a_single_clip() {
        let c = corpus(1);
        let (codec, trace) = train_codec(&c, &small(), 300, 2).unwrap();
        let smooth = trace.smoothed_recon(100);
        assert!(smooth.last().unwrap() < &smooth[0]);
        let init = Codec::new(small(), 2).unwrap();
        let before = reconstruction_mse(&init, &c).unwrap();
        let after = reconstruction_mse(&codec, &c).unwrap();
        assert!(after < 0.5 * before, "mse {before} -> {after}");
    }

    #[test]
    fn rejects_bad_corpus() {
        assert!(matches!(train_codec(&[], &small(), 1, 0), Err(Error::EmptyCorpus)));
        let wrong = vec![AudioClip::new(vec![0.0; 512], 8000).unwrap()];
        assert!(matches!(
            train_codec(&wrong, &small(), 1, 0),
            Err(Error::SampleRateMismatch { .. })
        ));
    }
}
