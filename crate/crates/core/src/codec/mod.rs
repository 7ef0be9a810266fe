//! Vector-quantized autoencoder that turns waveforms into discrete code
//! sequences at `sample_rate / H` codes per second, `H` being the product of
//! the encoder strides.

mod conv;
mod train;

pub use conv::{Conv1d, ConvTranspose1d, ResBlock};
pub use train::{reconstruction_mse, train, train_codec, CodecStep, CodecTrace};

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, Params};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub sample_rate: u32,
    /// Encoder strides; their product is the hop `H`.
    pub strides: Vec<usize>,
    /// Encoder channel widths, one per stride. The decoder mirrors them.
    pub channels: Vec<usize>,
    /// Dilations of the residual units at the code rate, in the encoder
    /// before the latent projection and in the decoder after it.
    pub res_dilations: Vec<usize>,
    pub latent_dim: usize,
    pub vocab: usize,
    /// Commitment weight β.
    pub beta: f64,
    pub ema_decay: f64,
    /// Codes whose EMA count drops below this are reseeded.
    pub dead_code_threshold: f64,
    pub batch_size: usize,
    /// Training crop length, in codes.
    pub crop_codes: usize,
    pub learning_rate: f64,
}

impl Default for CodecConfig {
    /// Desk-scale default: 16 kHz, H = 256 (62.5 codes/s), K = 256.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            strides: vec![4, 4, 4, 4],
            channels: vec![16, 32, 32, 32],
            res_dilations: vec![1, 3, 9],
            latent_dim: 16,
            vocab: 256,
            beta: 0.25,
            ema_decay: 0.99,
            dead_code_threshold: 1.0,
            batch_size: 8,
            crop_codes: 16,
            learning_rate: 1e-3,
        }
    }
}

impl CodecConfig {
    /// Full-rate reference: 44.1 kHz, H = 128 (≈345 codes/s), K = 2048.
    pub fn reference() -> Self {
        Self {
            sample_rate: 44_100,
            strides: vec![2, 4, 4, 4],
            channels: vec![8, 16, 16, 32],
            res_dilations: vec![1, 3, 9, 27],
            latent_dim: 32,
            vocab: 2048,
            ..Self::default()
        }
    }

    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    /// Codes per second.
    pub fn code_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::invalid("codec sample rate must be positive"));
        }
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(Error::invalid("codec strides must be non-empty and positive"));
        }
        if self.channels.len() != self.strides.len() || self.channels.contains(&0) {
            return Err(Error::invalid("codec needs one positive channel width per stride"));
        }
        if self.res_dilations.contains(&0) {
            return Err(Error::invalid("residual dilations must be positive"));
        }
        if self.vocab < 2 || self.latent_dim == 0 {
            return Err(Error::invalid("codec needs vocab >= 2 and latent_dim >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.beta < 0.0 {
            return Err(Error::invalid("ema_decay must be in [0, 1) and beta >= 0"));
        }
        if self.batch_size == 0 || self.crop_codes == 0 {
            return Err(Error::invalid("batch_size and crop_codes must be positive"));
        }
        Ok(())
    }
}

/// Discrete codes for one clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSequence {
    pub codes: Vec<u32>,
    pub sample_rate: u32,
    pub hop: usize,
    /// Length of the encoded clip in samples.
    pub source_len: usize,
}

impl CodeSequence {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Array2<f64>,
    pub ema_counts: Array1<f64>,
    pub ema_sums: Array2<f64>,
}

const LAPLACE_EPS: f64 = 1e-5;

impl Codebook {
    pub fn from_vectors(vectors: Array2<f64>) -> Self {
        Self {
            ema_counts: Array1::ones(vectors.nrows()),
            ema_sums: vectors.clone(),
            vectors,
        }
    }

    pub fn vocab(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Nearest codebook row by squared Euclidean distance; ties go to the lower index.
    pub fn nearest(&self, z: ndarray::ArrayView1<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, e) in self.vectors.rows().into_iter().enumerate() {
            let d: f64 = e.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// EMA update toward the mean of the latents assigned to each code.
    pub fn ema_update(&mut self, latents: &Array2<f64>, codes: &[u32], decay: f64) {
        let (k, d) = self.vectors.dim();
        let mut counts = Array1::<f64>::zeros(k);
        let mut sums = Array2::<f64>::zeros((k, d));
        for (row, &c) in latents.rows().into_iter().zip(codes) {
            counts[c as usize] += 1.0;
            let mut s = sums.row_mut(c as usize);
            s += &row;
        }
        self.ema_counts = &self.ema_counts * decay + &counts * (1.0 - decay);
        self.ema_sums = &self.ema_sums * decay + &sums * (1.0 - decay);
        let n = self.ema_counts.sum();
        for i in 0..k {
            let smoothed = (self.ema_counts[i] + LAPLACE_EPS) / (n + k as f64 * LAPLACE_EPS) * n;
            let e = &self.ema_sums.row(i) / smoothed;
            self.vectors.row_mut(i).assign(&e);
        }
    }

    /// Reseed codes whose EMA count fell below `threshold` from random latents.
    pub fn revive<R: Rng>(&mut self, latents: &Array2<f64>, threshold: f64, rng: &mut R) -> usize {
        let mut revived = 0;
        for i in 0..self.vocab() {
            if self.ema_counts[i] < threshold {
                let pick = rng.random_range(0..latents.nrows());
                self.vectors.row_mut(i).assign(&latents.row(pick));
                self.ema_sums.row_mut(i).assign(&latents.row(pick));
                self.ema_counts[i] = 1.0;
                revived += 1;
            }
        }
        revived
    }

    pub fn codes_in_use(&self, threshold: f64) -> usize {
        self.ema_counts.iter().filter(|&&c| c >= threshold).count()
    }
}

/// Snap each latent row to its nearest codebook vector.
pub fn quantize(latents: &Array2<f64>, codebook: &Codebook) -> Result<(Vec<u32>, Array2<f64>)> {
    if latents.ncols() != codebook.dim() {
        return Err(Error::invalid(format!(
            "latent dim {} does not match codebook dim {}",
            latents.ncols(),
            codebook.dim()
        )));
    }
    let codes: Vec<u32> = latents.rows().into_iter().map(|z| codebook.nearest(z) as u32).collect();
    let mut q = Array2::zeros(latents.dim());
    for (mut row, &c) in q.rows_mut().into_iter().zip(&codes) {
        row.assign(&codebook.vectors.row(c as usize));
    }
    Ok((codes, q))
}

/// Encoder and decoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecNet {
    pub enc: Vec<Conv1d>,
    pub enc_res: Vec<ResBlock>,
    pub enc_out: Conv1d,
    pub dec_in: Conv1d,
    pub dec_res: Vec<ResBlock>,
    pub dec: Vec<ConvTranspose1d>,
    pub dec_out: Conv1d,
}

impl Params for CodecNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for c in &self.enc {
            v.extend(c.tensors());
        }
        for r in &self.enc_res {
            v.extend(r.tensors());
        }
        v.extend(self.enc_out.tensors());
        v.extend(self.dec_in.tensors());
        for r in &self.dec_res {
            v.extend(r.tensors());
        }
        for c in &self.dec {
            v.extend(c.tensors());
        }
        v.extend(self.dec_out.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for c in &mut self.enc {
            v.extend(c.tensors_mut());
        }
        for r in &mut self.enc_res {
            v.extend(r.tensors_mut());
        }
        v.extend(self.enc_out.tensors_mut());
        v.extend(self.dec_in.tensors_mut());
        for r in &mut self.dec_res {
            v.extend(r.tensors_mut());
        }
        for c in &mut self.dec {
            v.extend(c.tensors_mut());
        }
        v.extend(self.dec_out.tensors_mut());
        v
    }
}

/// Loss terms for one example. `commitment` is `None` when no quantizer ran.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecLoss {
    pub recon: f64,
    pub commitment: Option<f64>,
}

impl CodecLoss {
    pub fn total(&self, beta: f64) -> f64 {
        self.recon + beta * self.commitment.unwrap_or(0.0)
    }
}

/// Outputs of one training forward/backward pass.
pub struct CodecPass {
    pub loss: CodecLoss,
    pub grads: CodecNet,
    pub latents: Array2<f64>,
    pub codes: Vec<u32>,
}

const GELU_GAIN: f64 = 1.5;

impl CodecNet {
    pub fn new<R: Rng>(config: &CodecConfig, rng: &mut R) -> Self {
        let mut enc = Vec::new();
        let mut c_prev = 1;
        for (&s, &c) in config.strides.iter().zip(&config.channels) {
            enc.push(Conv1d::downsample(rng, c_prev, c, s, GELU_GAIN));
            c_prev = c;
        }
        let enc_res = config.res_dilations.iter().map(|&d| ResBlock::new(rng, c_prev, d)).collect();
        let enc_out = Conv1d::new(rng, c_prev, config.latent_dim, 1, 1, 0, 1.0);
        let dec_in = Conv1d::new(rng, config.latent_dim, c_prev, 1, 1, 0, GELU_GAIN);
        let dec_res = config.res_dilations.iter().map(|&d| ResBlock::new(rng, c_prev, d)).collect();
        let mut dec = Vec::new();
        for i in (0..config.strides.len()).rev() {
            let c_out = config.channels[i.saturating_sub(1)];
            dec.push(ConvTranspose1d::upsample(rng, config.channels[i], c_out, config.strides[i], GELU_GAIN));
        }
        let dec_out = Conv1d::new(rng, config.channels[0], 1, 3, 1, 1, 0.5);
        Self {
            enc,
            enc_res,
            enc_out,
            dec_in,
            dec_res,
            dec,
            dec_out,
        }
    }

    pub fn hop(&self) -> usize {
        self.enc.iter().map(|c| c.stride).product()
    }

    /// Encoder output for a `[T, 1]` signal whose length is a multiple of the hop.
    pub fn encode_latents(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for c in &self.enc {
            h = c.forward(&h).mapv(gelu);
        }
        for r in &self.enc_res {
            h = r.forward(&h);
        }
        self.enc_out.forward(&h)
    }

    pub fn decode_latents(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut h = self.dec_in.forward(z).mapv(gelu);
        for r in &self.dec_res {
            h = r.forward(&h);
        }
        for t in &self.dec {
            h = t.forward(&h).mapv(gelu);
        }
        self.dec_out.forward(&h)
    }

    /// Reconstruction (+ commitment) loss and its gradient for one crop.
    ///
    /// With `codebook = None` the quantizer is the identity; with a codebook
    /// the backward pass copies the decoder-input gradient straight through
    /// to the encoder output.
    pub fn loss_and_grads(&self, signal: &[f64], codebook: Option<&Codebook>, beta: f64) -> Result<CodecPass> {
        let x = Array2::from_shape_vec((signal.len(), 1), signal.to_vec())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let mut enc_tape = Vec::with_capacity(self.enc.len());
        let mut h = x.clone();
        for c in &self.enc {
            let t_in = h.nrows();
            let (pre, p) = c.forward_train(&h);
            h = pre.mapv(gelu);
            enc_tape.push((p, pre, t_in));
        }
        let mut enc_res_tape = Vec::with_capacity(self.enc_res.len());
        for r in &self.enc_res {
            let (next, cache) = r.forward_train(&h);
            h = next;
            enc_res_tape.push(cache);
        }
        let enc_h_len = h.nrows();
        let (z_e, p_enc_out) = self.enc_out.forward_train(&h);
        let (codes, z_q) = match codebook {
            Some(cb) => quantize(&z_e, cb)?,
            None => (Vec::new(), z_e.clone()),
        };

        let (pre0, p_dec_in) = self.dec_in.forward_train(&z_q);
        h = pre0.mapv(gelu);
        let mut dec_res_tape = Vec::with_capacity(self.dec_res.len());
        for r in &self.dec_res {
            let (next, cache) = r.forward_train(&h);
            h = next;
            dec_res_tape.push(cache);
        }
        let mut dec_tape = Vec::with_capacity(self.dec.len());
        for t in &self.dec {
            let pre = t.forward(&h);
            let next = pre.mapv(gelu);
            dec_tape.push((std::mem::replace(&mut h, next), pre));
        }
        let (y, p_dec_out) = self.dec_out.forward_train(&h);

        let n = x.len() as f64;
        let diff = &y - &x;
        let recon = diff.mapv(|v| v * v).sum() / n;
        let commitment = codebook.map(|_| (&z_e - &z_q).mapv(|v| v * v).sum() / z_e.len() as f64);

        let mut g = self.clone();
        g.zero();
        let dy = diff * (2.0 / n);
        let mut dh = self.dec_out.backward(&p_dec_out, h.nrows(), &dy, &mut g.dec_out);
        for (i, (input, pre)) in dec_tape.iter().enumerate().rev() {
            let dpre = dh * &pre.mapv(gelu_grad);
            dh = self.dec[i].backward(input, &dpre, &mut g.dec[i]);
        }
        for (i, cache) in dec_res_tape.iter().enumerate().rev() {
            dh = self.dec_res[i].backward(cache, &dh, &mut g.dec_res[i]);
        }
        let dpre0 = dh * &pre0.mapv(gelu_grad);
        let mut dz = self.dec_in.backward(&p_dec_in, z_q.nrows(), &dpre0, &mut g.dec_in);
        if codebook.is_some() && beta > 0.0 {
            dz = dz + (&z_e - &z_q) * (2.0 * beta / z_e.len() as f64);
        }
        dh = self.enc_out.backward(&p_enc_out, enc_h_len, &dz, &mut g.enc_out);
        for (i, cache) in enc_res_tape.iter().enumerate().rev() {
            dh = self.enc_res[i].backward(cache, &dh, &mut g.enc_res[i]);
        }
        for (i, (p, pre, t_in)) in enc_tape.iter().enumerate().rev() {
            let dpre = dh * &pre.mapv(gelu_grad);
            dh = self.enc[i].backward(p, *t_in, &dpre, &mut g.enc[i]);
        }

        Ok(CodecPass {
            loss: CodecLoss { recon, commitment },
            grads: g,
            latents: z_e,
            codes,
        })
    }
}

/// A configured codec: network, codebook and training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub net: CodecNet,
    pub codebook: Codebook,
    pub trained_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct CodecMeta {
    config: CodecConfig,
    trained_steps: u64,
}

impl Codec {
    /// Untrained codec with seeded weights and a random codebook.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "codec-init");
        let net = CodecNet::new(&config, &mut rng);
        let vectors = crate::nn::normal_matrix(&mut rng, config.vocab, config.latent_dim, 1.0);
        Ok(Self {
            codebook: Codebook::from_vectors(vectors),
            net,
            config,
            trained_steps: 0,
        })
    }

    pub fn hop(&self) -> usize {
        self.config.hop()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn padded(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        if clip.sample_rate() != self.config.sample_rate {
            return Err(Error::SampleRateMismatch {
                expected: self.config.sample_rate,
                actual: clip.sample_rate(),
            });
        }
        let h = self.hop();
        let n = clip.len().div_ceil(h) * h;
        let mut x = Array2::zeros((n, 1));
        x.slice_mut(s![..clip.len(), 0])
            .assign(&ndarray::ArrayView1::from(clip.samples()));
        Ok(x)
    }

    /// Encoder latents of a clip, right-padded to a whole number of codes.
    pub fn latents(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        Ok(self.net.encode_latents(&self.padded(clip)?))
    }

    pub fn encode(&self, clip: &AudioClip) -> Result<CodeSequence> {
        let (codes, _) = quantize(&self.latents(clip)?, &self.codebook)?;
        Ok(CodeSequence {
            codes,
            sample_rate: self.config.sample_rate,
            hop: self.hop(),
            source_len: clip.len(),
        })
    }

    /// Waveform of `codes.len() × H` samples.
    pub fn decode(&self, codes: &CodeSequence) -> Result<AudioClip> {
        if codes.is_empty() {
            return Err(Error::EmptyCodes);
        }
        let k = self.codebook.vocab();
        let mut z = Array2::zeros((codes.len(), self.codebook.dim()));
        for (mut row, &c) in z.rows_mut().into_iter().zip(&codes.codes) {
            if c as usize >= k {
                return Err(Error::CodeOutOfRange { code: c, vocab: k });
            }
            row.assign(&self.codebook.vectors.row(c as usize));
        }
        let y = self.net.decode_latents(&z);
        AudioClip::new(y.index_axis(Axis(1), 0).to_vec(), self.config.sample_rate)
    }

    /// Encode then decode, trimmed back to the source length.
    pub fn reconstruct(&self, clip: &AudioClip) -> Result<AudioClip> {
        let codes = self.encode(clip)?;
        let y = self.decode(&codes)?;
        y.slice(0..codes.source_len)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CodecMeta {
            config: self.config.clone(),
            trained_steps: self.trained_steps,
        };
        let mut tensors: Vec<Tensor> = self
            .net
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| Tensor::new(format!("net.{i}"), vec![t.len()], t.to_vec()))
            .collect();
        let (k, d) = self.codebook.vectors.dim();
        let cb = &self.codebook;
        tensors.push(Tensor::new("codebook.vectors", vec![k, d], cb.vectors.iter().copied().collect()));
        tensors.push(Tensor::new("codebook.ema_counts", vec![k], cb.ema_counts.to_vec()));
        tensors.push(Tensor::new("codebook.ema_sums", vec![k, d], cb.ema_sums.iter().copied().collect()));
        Ok(Checkpoint {
            kind: "codec".into(),
            config_json: serde_json::to_string(&meta)?,
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("codec")?;
        let meta: CodecMeta = serde_json::from_str(&ckpt.config_json)?;
        let mut codec = Self::new(meta.config, 0)?;
        codec.trained_steps = meta.trained_steps;
        let mut targets = codec.net.tensors_mut();
        let cb = &mut codec.codebook;
        targets.push(cb.vectors.as_slice_mut().expect("standard layout"));
        targets.push(cb.ema_counts.as_slice_mut().expect("contiguous"));
        targets.push(cb.ema_sums.as_slice_mut().expect("standard layout"));
        ckpt.fill(targets)?;
        Ok(codec)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use ndarray::array;

    fn toy_config() -> CodecConfig {
        CodecConfig {
            sample_rate: 1000,
            strides: vec![2, 2],
            channels: vec![3, 4],
            latent_dim: 3,
            vocab: 8,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn quantize_examples() {
        let cb = Codebook::from_vectors(array![[0.0, 0.0], [1.0, 1.0]]);
        let (codes, q) = quantize(&array![[0.9, 0.8], [0.5, 0.5], [1.0, 1.0]], &cb).unwrap();
        assert_eq!(codes, vec![1, 0, 1]);
        assert_eq!(q.row(2), cb.vectors.row(1));
        assert!(quantize(&array![[1.0, 2.0, 3.0]], &cb).is_err());
    }

    #[test]
    fn length_arithmetic() {
        let codec = Codec::new(CodecConfig::default(), 1).unwrap();
        assert_eq!(codec.hop(), 256);
        let clip = AudioClip::new(vec![0.1; 16_000], 16_000).unwrap();
        let codes = codec.encode(&clip).unwrap();
        assert_eq!(codes.len(), 63);
        assert_eq!(codes.code_rate() * codes.hop as f64, 16_000.0);
        let whole = AudioClip::new(vec![0.1; 256 * 62], 16_000).unwrap();
        assert_eq!(codec.encode(&whole).unwrap().len(), 62);
        assert_eq!(codec.decode(&codes).unwrap().len(), 63 * 256);
        assert_eq!(codec.reconstruct(&clip).unwrap().len(), 16_000);
    }

    #[test]
    fn reference_rate() {
        let c = CodecConfig::reference();
        assert_eq!(c.hop(), 128);
        assert!((c.code_rate() - 344.53125).abs() < 1e-12);
        // 24 s at 44.1 kHz
        assert_eq!((24 * 44_100usize).div_ceil(c.hop()), 8269);
    }

    #[test]
    fn encode_errors_and_determinism() {
        let codec = Codec::new(toy_config(), 5).unwrap();
        let wrong = AudioClip::new(vec![0.0; 100], 2000).unwrap();
        assert!(matches!(codec.encode(&wrong), Err(Error::SampleRateMismatch { .. })));
        let clip = AudioClip::new((0..203).map(|i| (i as f64 * 0.3).sin()).collect(), 1000).unwrap();
        let a = codec.encode(&clip).unwrap();
        assert_eq!(a, codec.encode(&clip).unwrap());
        assert!(a.codes.iter().all(|&c| (c as usize) < 8));
        assert_eq!(codec.decode(&a).unwrap(), codec.decode(&a).unwrap());
        let empty = CodeSequence {
            codes: vec![],
            ..a.clone()
        };
        assert!(matches!(codec.decode(&empty), Err(Error::EmptyCodes)));
        let bad = CodeSequence {
            codes: vec![8],
            ..a
        };
        assert!(matches!(codec.decode(&bad), Err(Error::CodeOutOfRange { code: 8, .. })));
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let codec = Codec::new(toy_config(), 7).unwrap();
        let signal: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin() * 0.8).collect();
        let pass = codec.net.loss_and_grads(&signal, None, 0.0).unwrap();
        assert_eq!(pass.loss.commitment, None);
        let loss = |n: &CodecNet| n.loss_and_grads(&signal, None, 0.0).unwrap().loss.recon;
        let err = gradcheck::max_relative_error(&codec.net, &pass.grads, loss, 1e-5, usize::MAX);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn commitment_gradient_reaches_the_encoder() {
        let codec = Codec::new(toy_config(), 8).unwrap();
        let signal: Vec<f64> = (0..16).map(|i| (i as f64 * 0.4).cos() * 0.5).collect();
        let with = codec.net.loss_and_grads(&signal, Some(&codec.codebook), 1.0).unwrap();
        let without = codec.net.loss_and_grads(&signal, Some(&codec.codebook), 0.0).unwrap();
        assert!(with.loss.commitment.unwrap() > 0.0);
        assert_eq!(with.grads.dec_out, without.grads.dec_out);
        assert_ne!(with.grads.enc_out, without.grads.enc_out);
    }

    #[test]
    fn checkpoint_round_trip() {
        let codec = Codec::new(toy_config(), 9).unwrap();
        let back = Codec::from_checkpoint(&codec.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, codec);
    }

    #[test]
    fn ema_moves_codes_toward_assigned_mean() {
        let mut cb = Codebook::from_vectors(array![[0.0, 0.0], [10.0, 10.0]]);
        let z = array![[1.0, 1.0], [1.0, 1.0]];
        for _ in 0..2000 {
            cb.ema_update(&z, &[0, 0], 0.99);
        }
        assert!((cb.vectors[[0, 0]] - 1.0).abs() < 1e-3);
        let mut g = rng::from_seed(0);
        assert_eq!(cb.revive(&z, 0.5, &mut g), 1);
        assert_eq!(cb.vectors.row(1), z.row(0));
    }
}
