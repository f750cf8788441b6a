//! Spectral multi-label classifier trained on real corpus audio; supplies
//! posteriors and a penultimate embedding to the generation metrics.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::metrics::conditioning_accuracy;
use crate::checkpoint::{self, CheckpointMeta, Provenance};
use crate::corpus::{AudioClip, Corpus, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{bce_with_logits, scalar, Linear, ParamBuilder, ParamStore};
use crate::rng::{derive_seed_str, normal_vec, permutation, seeded};
use crate::train::{adamw, ensure_finite, Optimizer, TrainLog};

pub const CHECKPOINT_KIND: &str = "oracle_classifier";
/// Lower bound on the per-band feature std used for standardization.
pub const STD_FLOOR: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub fft_size: usize,
    pub bands: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Band energies more than this far below the loudest band are clamped.
    pub dynamic_range_db: f64,
    /// Noisy copies of each training clip, white noise at an SNR drawn
    /// uniformly from `augment_snr_db`.
    pub augment_copies: usize,
    pub augment_snr_db: [f64; 2],
    /// Minimum held-out F1 before the oracle may be used.
    pub min_f1: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            bands: 128,
            hidden: 64,
            embed_dim: 16,
            epochs: 150,
            lr: 3e-3,
            batch_size: 32,
            dynamic_range_db: 30.0,
            augment_copies: 2,
            augment_snr_db: [10.0, 30.0],
            min_f1: 0.95,
        }
    }
}

/// Log band energy over Hann-windowed frames, relative to the loudest band
/// and clamped at `-dynamic_range_db`.
pub struct SpectralFeatures {
    fft: Arc<dyn Fft<f64>>,
    size: usize,
    bands: usize,
    window: Vec<f64>,
    floor: f64,
}

impl SpectralFeatures {
    pub fn new(size: usize, bands: usize, dynamic_range_db: f64) -> Result<Self> {
        if size < 2 * bands || bands == 0 {
            return Err(Error::Config(format!("{bands} bands do not fit an FFT of {size}")));
        }
        if !(dynamic_range_db > 0.0) {
            return Err(Error::Config(format!("dynamic range {dynamic_range_db} dB must be positive")));
        }
        let window = (0..size)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / size as f64).cos())
            .collect();
        Ok(Self {
            fft: FftPlanner::new().plan_fft_forward(size),
            size,
            bands,
            window,
            floor: 10f64.powf(-dynamic_range_db / 10.0),
        })
    }

    pub fn extract(&self, samples: &[f32]) -> Vec<f32> {
        let bins = self.size / 2;
        let per_band = bins / self.bands;
        let mut power = vec![0.0f64; bins];
        let mut frames = 0usize;
        let mut buf = vec![Complex::new(0.0, 0.0); self.size];
        let mut start = 0;
        while start + self.size <= samples.len() || (frames == 0 && start < samples.len().max(1)) {
            for (i, c) in buf.iter_mut().enumerate() {
                let s = samples.get(start + i).copied().unwrap_or(0.0) as f64;
                *c = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p += c.norm_sqr();
            }
            frames += 1;
            start += self.size;
        }
        let energy: Vec<f64> = (0..self.bands)
            .map(|b| power[b * per_band..(b + 1) * per_band].iter().sum::<f64>())
            .collect();
        let loudest = energy.iter().fold(0.0f64, |m, &e| m.max(e));
        if loudest <= 0.0 {
            return vec![self.floor.ln() as f32; self.bands];
        }
        energy.iter().map(|e| (e / loudest).max(self.floor).ln() as f32).collect()
    }
}

#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub config: OracleConfig,
    store: ParamStore,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
    /// Feature standardization fitted on the training split.
    feat_mean: Vec<f32>,
    feat_std: Vec<f32>,
}

/// Posteriors (sigmoid) and penultimate embeddings of a batch of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub posteriors: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

impl OracleClassifier {
    fn build(config: OracleConfig, mut store: ParamStore, feat_mean: Vec<f32>, feat_std: Vec<f32>, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let (fc1, fc2, out) = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            (
                Linear::new(&mut b.pp("fc1"), config.bands, config.hidden)?,
                Linear::new(&mut b.pp("fc2"), config.hidden, config.embed_dim)?,
                Linear::new(&mut b.pp("out"), config.embed_dim, NUM_CLASSES)?,
            )
        };
        store.seal();
        Ok(Self {
            config,
            store,
            fc1,
            fc2,
            out,
            feat_mean,
            feat_std,
        })
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    fn features(&self, clips: &[&[f32]]) -> Result<Tensor> {
        let fx = SpectralFeatures::new(self.config.fft_size, self.config.bands, self.config.dynamic_range_db)?;
        let data: Vec<f32> = clips
            .iter()
            .flat_map(|c| {
                fx.extract(c)
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| (v - self.feat_mean[i]) / self.feat_std[i])
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(Tensor::from_vec(data, (clips.len(), self.config.bands), &Device::Cpu)?)
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let emb = self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)?.gelu_erf()?;
        Ok((self.out.forward(&emb)?, emb))
    }

    pub fn run(&self, clips: &[&[f32]]) -> Result<OracleOutput> {
        if clips.is_empty() {
            return Ok(OracleOutput {
                posteriors: Vec::new(),
                embeddings: Vec::new(),
            });
        }
        let (logits, emb) = self.forward(&self.features(clips)?)?;
        let to_rows = |t: Tensor| -> Result<Vec<Vec<f64>>> { Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?) };
        Ok(OracleOutput {
            posteriors: to_rows(candle_nn::ops::sigmoid(&logits)?)?,
            embeddings: to_rows(emb)?,
        })
    }

    pub fn run_clips(&self, clips: &[AudioClip]) -> Result<OracleOutput> {
        let refs: Vec<&[f32]> = clips.iter().map(|c| c.samples.as_slice()).collect();
        self.run(&refs)
    }

    pub fn save(&self, path: &Path, log: &TrainLog, heldout_f1: f64, upstream: &Provenance) -> Result<String> {
        let meta = CheckpointMeta::new(CHECKPOINT_KIND, serde_json::to_value(&self.config)?)
            .with_upstreams(upstream)
            .with_extra("feat_mean", serde_json::to_value(&self.feat_mean)?)
            .with_extra("feat_std", serde_json::to_value(&self.feat_std)?)
            .with_extra("heldout_f1", serde_json::to_value(heldout_f1)?)
            .with_extra("train_log", serde_json::to_value(log)?);
        checkpoint::save(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, f64)> {
        let (store, meta) = checkpoint::load(path, CHECKPOINT_KIND, DType::F32)?;
        let get = |k: &str| {
            meta.extra.get(k).cloned().ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("missing {k}"),
            })
        };
        let config: OracleConfig = serde_json::from_value(meta.config.clone())?;
        let mean: Vec<f32> = serde_json::from_value(get("feat_mean")?)?;
        let std: Vec<f32> = serde_json::from_value(get("feat_std")?)?;
        let f1: f64 = serde_json::from_value(get("heldout_f1")?)?;
        Ok((Self::build(config, store, mean, std, 0)?, f1))
    }
}

fn load_split(corpus: &Corpus, split: Split) -> Result<(Vec<Vec<f32>>, Vec<Vec<usize>>)> {
    let records = corpus.split(split);
    if records.is_empty() {
        return Err(Error::Invalid(format!("corpus split {split:?} is empty")));
    }
    let mut clips = Vec::new();
    let mut events = Vec::new();
    for r in records {
        clips.push(corpus.load_audio(r)?.samples);
        events.push(r.events.clone());
    }
    Ok((clips, events))
}

/// Appends `augment_copies` noisy versions of every clip.
fn augment(
    clips: Vec<Vec<f32>>,
    events: Vec<Vec<usize>>,
    config: &OracleConfig,
    seed: u64,
) -> (Vec<Vec<f32>>, Vec<Vec<usize>>) {
    let mut rng = seeded(seed);
    let (mut out_clips, mut out_events) = (clips.clone(), events.clone());
    for _ in 0..config.augment_copies {
        for (clip, ev) in clips.iter().zip(&events) {
            let [lo, hi] = config.augment_snr_db;
            let snr = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let power = clip.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / clip.len().max(1) as f64;
            let amp = (power / 10f64.powf(snr / 10.0)).sqrt() as f32;
            let noise = normal_vec(&mut rng, clip.len());
            out_clips.push(clip.iter().zip(noise).map(|(&v, n)| v + amp * n).collect());
            out_events.push(ev.clone());
        }
    }
    (out_clips, out_events)
}

/// Trains on real training audio and refuses to return an oracle whose
/// test-split F1 falls below `config.min_f1`.
pub fn train_oracle(corpus: &Corpus, config: &OracleConfig, seed: u64) -> Result<(OracleClassifier, TrainLog, f64)> {
    let (train_clips, train_events) = load_split(corpus, Split::Train)?;
    let (test_clips, test_events) = load_split(corpus, Split::Test)?;
    let (train_clips, train_events) = augment(train_clips, train_events, config, derive_seed_str(seed, "oracle-augment"));
    let fx = SpectralFeatures::new(config.fft_size, config.bands, config.dynamic_range_db)?;
    let raw: Vec<Vec<f32>> = train_clips.iter().map(|c| fx.extract(c)).collect();
    let n = raw.len();
    let mut mean = vec![0.0f32; config.bands];
    let mut std = vec![0.0f32; config.bands];
    for r in &raw {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f32;
        }
    }
    for r in &raw {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n as f32;
        }
    }
    let std: Vec<f32> = std.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
    let oracle = OracleClassifier::build(
        config.clone(),
        ParamStore::new(DType::F32),
        mean,
        std,
        derive_seed_str(seed, "oracle-init"),
    )?;
    let refs: Vec<&[f32]> = train_clips.iter().map(|c| c.as_slice()).collect();
    let x = oracle.features(&refs)?;
    let y: Vec<f32> = train_events
        .iter()
        .flat_map(|ev| (0..NUM_CLASSES).map(move |c| if ev.contains(&c) { 1.0 } else { 0.0 }))
        .collect();
    let y = Tensor::from_vec(y, (n, NUM_CLASSES), &Device::Cpu)?;
    let mut opt = adamw(oracle.store.vars(), config.lr, 1e-4)?;
    let mut rng = seeded(derive_seed_str(seed, "oracle-batches"));
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let order = permutation(&mut rng, n);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let (logits, _) = oracle.forward(&x.index_select(&idx, 0)?)?;
            let loss = bce_with_logits(&logits, &y.index_select(&idx, 0)?)?;
            let v = scalar(&loss)?;
            ensure_finite(v, "oracle classifier", epoch)?;
            opt.backward_step(&loss)?;
            total += v * chunk.len() as f64;
        }
        log.train_loss.push(total / n as f64);
    }
    log.epochs_run = config.epochs;
    log.best_epoch = config.epochs.saturating_sub(1);

    let test_refs: Vec<&[f32]> = test_clips.iter().map(|c| c.as_slice()).collect();
    let f1 = conditioning_accuracy(&oracle.run(&test_refs)?.posteriors, &test_events)?;
    if f1 < config.min_f1 {
        return Err(Error::Gate(format!(
            "oracle classifier held-out F1 {f1:.3} is below {:.2}; corpus or training is misconfigured",
            config.min_f1
        )));
    }
    Ok((oracle, log, f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_audio, SAMPLE_RATE};

    #[test]
    fn features_peak_near_the_event_band() {
        let fx = SpectralFeatures::new(512, 128, 30.0).unwrap();
        let clip = render_audio(&[0], 1.0, 2).unwrap();
        let f = fx.extract(&clip.samples);
        let best = f.iter().enumerate().fold((0, f32::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
        let band_hz = SAMPLE_RATE as f64 / 2.0 / 128.0;
        assert_eq!(best, (440.0 / band_hz) as usize);
    }

    #[test]
    fn features_ignore_overall_gain() {
        let fx = SpectralFeatures::new(512, 64, 30.0).unwrap();
        let clip = render_audio(&[3, 5], 1.0, 4).unwrap();
        let half: Vec<f32> = clip.samples.iter().map(|v| v * 0.5).collect();
        for (a, b) in fx.extract(&clip.samples).iter().zip(fx.extract(&half)) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn broadband_floor_below_the_dynamic_range_is_clamped() {
        let fx = SpectralFeatures::new(512, 128, 30.0).unwrap();
        let clip = render_audio(&[0], 1.0, 2).unwrap();
        let noise = normal_vec(&mut seeded(9), clip.samples.len());
        let noisy: Vec<f32> = clip.samples.iter().zip(noise).map(|(v, n)| v + 2e-3 * n).collect();
        let (a, b) = (fx.extract(&clip.samples), fx.extract(&noisy));
        let floor = (1e-3f64).ln() as f32;
        assert!(a.iter().chain(&b).all(|&v| v >= floor - 1e-4 && v <= 1e-6));
        let changed = a.iter().zip(&b).filter(|(x, y)| (*x - *y).abs() > 0.5).count();
        assert!(changed < 4, "{changed} bands moved");
    }

    #[test]
    fn augmentation_keeps_labels_and_adds_noise() {
        let cfg = OracleConfig { augment_copies: 2, ..OracleConfig::default() };
        let clips = vec![vec![0.5f32; 64], vec![-0.25f32; 64]];
        let events = vec![vec![1], vec![2, 3]];
        let (c, e) = augment(clips.clone(), events.clone(), &cfg, 4);
        assert_eq!(c.len(), 6);
        assert_eq!(e, [events.clone(), events.clone(), events].concat());
        assert_eq!(&c[..2], &clips[..]);
        assert_ne!(c[2], clips[0]);
        assert_eq!(c, augment(clips, e[..2].to_vec(), &cfg, 4).0);
    }

    #[test]
    fn posteriors_are_probabilities() {
        let oracle = OracleClassifier::build(
            OracleConfig::default(),
            ParamStore::new(DType::F32),
            vec![0.0; 128],
            vec![1.0; 128],
            1,
        )
        .unwrap();
        let clip = render_audio(&[1], 0.5, 1).unwrap();
        let out = oracle.run(&[&clip.samples]).unwrap();
        assert_eq!(out.posteriors[0].len(), NUM_CLASSES);
        assert_eq!(out.embeddings[0].len(), 16);
        assert!(out.posteriors[0].iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
