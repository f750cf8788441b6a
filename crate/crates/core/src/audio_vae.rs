//! Waveform VAE: non-overlapping frames of `R` samples are mapped to a
//! `D`-dimensional Gaussian latent per frame and back.
//!
//! With kernel = stride = `R` a strided 1-D convolution is a framewise
//! affine map, so each encoder/decoder stage is a [`Linear`] applied per
//! frame. Optional hidden widths add GELU stages in between.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, Provenance};
use crate::corpus::{AudioClip, Corpus, Split, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{scalar, Linear, ParamBuilder, ParamStore};
use crate::rng::{derive_seed_str, normal_vec, permutation, seeded};
use crate::train::{adamw, ensure_finite, Optimizer, TrainLog};

pub const CHECKPOINT_KIND: &str = "audio_vae";
pub const SIGMA_MIN: f64 = 1e-8;
pub const SIGMA_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    /// Compression ratio `R` (samples per latent frame).
    pub ratio: usize,
    /// Latent width `D`.
    pub latent_dim: usize,
    pub kl_weight: f64,
    /// Hidden widths between the frame and the latent (empty = one affine stage).
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_frames: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            ratio: 512,
            latent_dim: 16,
            kl_weight: 0.01,
            hidden: Vec::new(),
            epochs: 30,
            lr: 2e-3,
            batch_frames: 256,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.ratio.is_power_of_two() || self.ratio < 2 {
            return Err(Error::Config(format!("compression ratio {} is not a power of two", self.ratio)));
        }
        if self.latent_dim < 4 {
            return Err(Error::Config("latent width must be at least 4".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// `L = ceil(T / R)`.
    pub fn latent_len(&self, samples: usize) -> usize {
        samples.div_ceil(self.ratio)
    }
}

/// Per-frame Gaussian posterior; `z_sigma` holds standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub z_mu: Matrix,
    pub z_sigma: Matrix,
    /// Waveform length the latent was computed from.
    pub num_samples: usize,
}

impl Latent {
    pub fn len(&self) -> usize {
        self.z_mu.rows
    }

    pub fn is_empty(&self) -> bool {
        self.z_mu.rows == 0
    }
}

/// `z = z_mu + z_sigma * eps`, `eps ~ N(0, I)` from `seed`.
pub fn vae_sample(latent: &Latent, seed: u64) -> Matrix {
    let eps = normal_vec(&mut seeded(seed), latent.z_mu.data.len());
    let data = latent
        .z_mu
        .data
        .iter()
        .zip(&latent.z_sigma.data)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect();
    Matrix {
        rows: latent.z_mu.rows,
        cols: latent.z_mu.cols,
        data,
    }
}

/// `KL(N(mu, sigma^2) || N(0, 1))` for one scalar dimension.
pub fn kl_scalar(mu: f64, sigma: f64) -> f64 {
    0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * sigma.ln())
}

/// Summed KL of a diagonal Gaussian against the standard normal.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter().zip(sigma).map(|(&m, &s)| kl_scalar(m, s)).sum()
}

/// `10 log10(|x|^2 / |x - y|^2)` over the common prefix.
pub fn snr_db(reference: &[f32], estimate: &[f32]) -> f64 {
    let (mut sig, mut err) = (0.0f64, 0.0f64);
    for (&x, &y) in reference.iter().zip(estimate) {
        sig += (x as f64).powi(2);
        err += (x as f64 - y as f64).powi(2);
    }
    10.0 * (sig / err.max(1e-30)).log10()
}

/// Per-dimension mean and std of training-set `z_mu`, used to standardize
/// latents for the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, z: &Matrix) -> Matrix {
        self.map(z, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, z: &Matrix) -> Matrix {
        self.map(z, |v, m, s| v * s + m)
    }

    fn map(&self, z: &Matrix, f: impl Fn(f32, f32, f32) -> f32) -> Matrix {
        let data = z
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % z.cols;
                f(v, self.mean[c], self.std[c])
            })
            .collect();
        Matrix {
            rows: z.rows,
            cols: z.cols,
            data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AudioVae {
    pub config: VaeConfig,
    pub stats: LatentStats,
    store: ParamStore,
    encoder: Vec<Linear>,
    decoder: Vec<Linear>,
}

fn stack_layers(b: &mut ParamBuilder, widths: &[usize]) -> Result<Vec<Linear>> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(&mut b.pp(&format!("l{i}")), w[0], w[1]))
        .collect()
}

fn run_layers(layers: &[Linear], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(&h)?;
        if i + 1 < layers.len() {
            h = h.gelu_erf()?;
        }
    }
    Ok(h)
}

impl AudioVae {
    fn build(config: VaeConfig, stats: LatentStats, mut store: ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut enc_w = vec![config.ratio];
        enc_w.extend(&config.hidden);
        enc_w.push(2 * config.latent_dim);
        let mut dec_w = vec![config.latent_dim];
        dec_w.extend(config.hidden.iter().rev());
        dec_w.push(config.ratio);
        let (encoder, decoder) = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            (stack_layers(&mut b.pp("enc"), &enc_w)?, stack_layers(&mut b.pp("dec"), &dec_w)?)
        };
        store.seal();
        Ok(Self {
            config,
            stats,
            store,
            encoder,
            decoder,
        })
    }

    pub fn init(config: VaeConfig, seed: u64, dtype: DType) -> Result<Self> {
        let stats = LatentStats::identity(config.latent_dim);
        Self::build(config, stats, ParamStore::new(dtype), seed)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Zero-pads to a multiple of `R` and splits into `L x R` frames.
    pub fn frames(&self, samples: &[f32]) -> Result<Matrix> {
        let r = self.config.ratio;
        if samples.len() < r {
            return Err(Error::Invalid(format!(
                "clip of {} samples is shorter than one latent frame ({r})",
                samples.len()
            )));
        }
        let l = self.config.latent_len(samples.len());
        let mut data = samples.to_vec();
        data.resize(l * r, 0.0);
        Matrix::new(l, r, data)
    }

    /// `(..., R)` frames → `(mu, log_std)` each `(..., D)`; log-std clamped.
    pub fn encode_tensor(&self, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = run_layers(&self.encoder, &frames.to_dtype(self.store.dtype())?)?;
        let d = self.config.latent_dim;
        let last = out.rank() - 1;
        let mu = out.narrow(last, 0, d)?;
        let log_std = out.narrow(last, d, d)?.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln())?;
        Ok((mu, log_std))
    }

    /// `(..., D)` latents → `(..., R)` frames (unclamped).
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        run_layers(&self.decoder, &z.to_dtype(self.store.dtype())?)
    }

    pub fn encode(&self, clip: &AudioClip) -> Result<Latent> {
        let frames = self.frames(&clip.samples)?.to_tensor(self.store.dtype(), &Device::Cpu)?;
        let (mu, log_std) = self.encode_tensor(&frames)?;
        Ok(Latent {
            z_mu: Matrix::from_tensor(&mu)?,
            z_sigma: Matrix::from_tensor(&log_std.exp()?)?,
            num_samples: clip.samples.len(),
        })
    }

    /// Decodes `L x D` latents to `L * R` samples (trimmed to `num_samples`
    /// when given), clamped to `[-1, 1]`.
    pub fn decode(&self, z: &Matrix, num_samples: Option<usize>) -> Result<AudioClip> {
        if z.cols != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent width {} does not match the VAE ({})",
                z.cols, self.config.latent_dim
            )));
        }
        let out = self.decode_tensor(&z.to_tensor(self.store.dtype(), &Device::Cpu)?)?;
        let mut samples: Vec<f32> = out
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        if let Some(n) = num_samples {
            samples.truncate(n);
        }
        Ok(AudioClip {
            samples,
            sample_rate: SAMPLE_RATE,
            events: Vec::new(),
        })
    }

    /// Per-frame summed squared error plus `beta` times per-frame summed KL,
    /// both averaged over frames, on a reparameterized sample.
    fn loss(&self, frames: &Tensor, eps: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mu, log_std) = self.encode_tensor(frames)?;
        let sigma = log_std.exp()?;
        let z = (&mu + sigma.mul(eps)?)?;
        let recon = (self.decode_tensor(&z)? - frames)?.sqr()?.sum(1)?.mean_all()?;
        // 0.5 (mu^2 + sigma^2 - 1) - log sigma
        let kl = (((mu.sqr()? + sigma.sqr()?)? - 1.0)? * 0.5)?.sub(&log_std)?.sum(1)?.mean_all()?;
        let total = (&recon + (kl * self.config.kl_weight)?)?;
        Ok((total, recon))
    }

    /// Mean per-frame squared error decoding `z_mu` (deterministic).
    fn recon_error(&self, frames: &Tensor) -> Result<f64> {
        let (mu, _) = self.encode_tensor(frames)?;
        scalar(&(self.decode_tensor(&mu)? - frames)?.sqr()?.sum(1)?.mean_all()?)
    }

    pub fn save(&self, path: &Path, log: &TrainLog, upstream: &Provenance) -> Result<String> {
        let meta = CheckpointMeta::new(CHECKPOINT_KIND, serde_json::to_value(&self.config)?)
            .with_upstreams(upstream)
            .with_extra("latent_stats", serde_json::to_value(&self.stats)?)
            .with_extra("train_log", serde_json::to_value(log)?);
        checkpoint::save(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load(path, CHECKPOINT_KIND, DType::F32)?;
        let config: VaeConfig = serde_json::from_value(meta.config)?;
        let stats: LatentStats = match meta.extra.get("latent_stats") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => LatentStats::identity(config.latent_dim),
        };
        Self::build(config, stats, store, 0)
    }
}

fn split_frames(vae: &AudioVae, corpus: &Corpus, split: Split) -> Result<Tensor> {
    let records = corpus.split(split);
    if records.is_empty() {
        return Err(Error::Invalid(format!("corpus split {split:?} is empty")));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for r in records {
        let m = vae.frames(&corpus.load_audio(r)?.samples)?;
        rows += m.rows;
        data.extend(m.data);
    }
    Ok(Tensor::from_vec(data, (rows, vae.config.ratio), &Device::Cpu)?.to_dtype(vae.store.dtype())?)
}

/// Trains on every frame of the training split; keeps the weights with the
/// lowest validation reconstruction error and records latent statistics.
pub fn train_vae(corpus: &Corpus, config: &VaeConfig, seed: u64) -> Result<(AudioVae, TrainLog)> {
    let mut vae = AudioVae::init(config.clone(), derive_seed_str(seed, "vae-init"), DType::F32)?;
    let train = split_frames(&vae, corpus, Split::Train)?;
    let val = split_frames(&vae, corpus, Split::Val)?;
    let n = train.dim(0)?;
    let mut opt = adamw(vae.store.vars(), config.lr, 0.0)?;
    let mut rng = seeded(derive_seed_str(seed, "vae-batches"));
    let mut log = TrainLog {
        initial_val: Some(vae.recon_error(&val)?),
        ..TrainLog::default()
    };
    let mut best = (f64::INFINITY, vae.store.snapshot()?);
    for epoch in 0..config.epochs {
        let order = permutation(&mut rng, n);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_frames.max(1)) {
            let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let x = train.index_select(&idx, 0)?;
            let eps = Tensor::from_vec(
                normal_vec(&mut rng, chunk.len() * config.latent_dim),
                (chunk.len(), config.latent_dim),
                &Device::Cpu,
            )?
            .to_dtype(vae.store.dtype())?;
            let (loss, _) = vae.loss(&x, &eps)?;
            let v = scalar(&loss)?;
            ensure_finite(v, "VAE training", epoch)?;
            opt.backward_step(&loss)?;
            total += v * chunk.len() as f64;
            count += chunk.len();
        }
        let v = vae.recon_error(&val)?;
        ensure_finite(v, "VAE training", epoch)?;
        log.train_loss.push(total / count as f64);
        log.val_metric.push(v);
        if v < best.0 {
            best = (v, vae.store.snapshot()?);
            log.best_epoch = epoch;
        }
        log::debug!("vae epoch {epoch}: train {:.4} val recon {v:.4}", total / count as f64);
    }
    log.epochs_run = config.epochs;
    vae.store.restore(&best.1)?;

    let (mu, _) = vae.encode_tensor(&train)?;
    let mu = mu.to_dtype(DType::F64)?;
    let mean = mu.mean(0)?;
    let std = mu.broadcast_sub(&mean)?.sqr()?.mean(0)?.sqrt()?;
    vae.stats = LatentStats {
        mean: mean.to_dtype(DType::F32)?.to_vec1()?,
        std: std
            .to_vec1::<f64>()?
            .into_iter()
            .map(|s| s.max(1e-6) as f32)
            .collect(),
    };
    Ok((vae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render_audio;

    fn vae() -> AudioVae {
        AudioVae::init(VaeConfig::default(), 5, DType::F32).unwrap()
    }

    #[test]
    fn latent_shape_follows_ceil() {
        let clip = render_audio(&[0, 3], 2.0, 1).unwrap();
        assert_eq!(clip.samples.len(), 32000);
        let z = vae().encode(&clip).unwrap();
        assert_eq!((z.z_mu.rows, z.z_mu.cols), (63, 16));
        assert_eq!((z.z_sigma.rows, z.z_sigma.cols), (63, 16));
        assert!(z.z_sigma.data.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn encoding_is_deterministic_and_short_clips_rejected() {
        let v = vae();
        let clip = render_audio(&[2], 0.5, 3).unwrap();
        assert_eq!(v.encode(&clip).unwrap(), v.encode(&clip).unwrap());
        let short = AudioClip {
            samples: vec![0.0; 100],
            sample_rate: SAMPLE_RATE,
            events: vec![],
        };
        assert!(v.encode(&short).is_err());
    }

    #[test]
    fn decode_length_and_trim() {
        let v = vae();
        let z = Matrix::zeros(63, 16);
        let full = v.decode(&z, None).unwrap();
        assert_eq!(full.samples.len(), 63 * 512);
        assert!(full.samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0));
        assert_eq!(v.decode(&z, Some(32000)).unwrap().samples.len(), 32000);
        assert!(v.decode(&Matrix::zeros(63, 8), None).is_err());
    }

    #[test]
    fn degenerate_sigma_sample_is_the_mean() {
        let mu = Matrix::new(2, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let latent = Latent {
            z_mu: mu.clone(),
            z_sigma: Matrix::new(2, 2, vec![SIGMA_MIN as f32; 4]).unwrap(),
            num_samples: 1024,
        };
        let z = vae_sample(&latent, 9);
        for (a, b) in z.data.iter().zip(&mu.data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(vae_sample(&latent, 9), z);
    }

    #[test]
    fn unit_gaussian_sample_moments() {
        let latent = Latent {
            z_mu: Matrix::zeros(10_000, 1),
            z_sigma: Matrix::new(10_000, 1, vec![1.0; 10_000]).unwrap(),
            num_samples: 0,
        };
        let z = vae_sample(&latent, 17);
        let n = z.data.len() as f64;
        let mean = z.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (z.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 0.05, "{mean}");
        assert!((0.95..=1.05).contains(&std), "{std}");
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_divergence(&[0.0; 4], &[1.0; 4]), 0.0);
        assert_eq!(kl_scalar(1.0, 1.0), 0.5);
    }

    #[test]
    fn training_loss_kl_matches_closed_form() {
        let v = AudioVae::init(VaeConfig::default(), 2, DType::F64).unwrap();
        let x = Tensor::from_vec(
            crate::rng::normal_vec_f64(&mut seeded(1), 3 * 512),
            (3, 512),
            &Device::Cpu,
        )
        .unwrap();
        let eps = Tensor::zeros((3, 16), DType::F64, &Device::Cpu).unwrap();
        let (total, recon) = v.loss(&x, &eps).unwrap();
        let (mu, log_std) = v.encode_tensor(&x).unwrap();
        let mu = mu.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let sigma: Vec<f64> = log_std.exp().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let kl = kl_divergence(&mu, &sigma) / 3.0;
        let got = scalar(&total).unwrap() - scalar(&recon).unwrap();
        assert!((got - 0.01 * kl).abs() < 1e-10, "{got} vs {}", 0.01 * kl);
    }

    #[test]
    fn stats_round_trip() {
        let stats = LatentStats {
            mean: vec![1.0, -2.0],
            std: vec![0.5, 4.0],
        };
        let z = Matrix::new(2, 2, vec![3.0, 0.0, -1.0, 8.0]).unwrap();
        assert_eq!(stats.denormalize(&stats.normalize(&z)), z);
    }

    #[test]
    fn config_guards() {
        assert!(VaeConfig { ratio: 500, ..VaeConfig::default() }.validate().is_err());
        assert!(VaeConfig { latent_dim: 2, ..VaeConfig::default() }.validate().is_err());
    }
}
