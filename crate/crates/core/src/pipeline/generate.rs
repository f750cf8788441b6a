//! Conditioning front ends and batched synthesis.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{require, Layout};
use crate::audio_vae::AudioVae;
use crate::bridge::{rep_for_generation, BridgeKind, Conditioning};
use crate::corpus::{write_wav, AudioClip, SpeechUtterance};
use crate::error::{Error, Result};
use crate::flowmatch::{sample_seeded, FlowExample, SamplerConfig, VelocityNet};
use crate::matrix::Matrix;
use crate::probe::Stage1Model;
use crate::speech_encoder::{EncoderKind, SpeechEncoder};

/// Items sampled together.
pub const SYNTH_BATCH: usize = 25;

/// Which speech front end conditions the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Semantic encoder followed by the Q-Former bridge.
    Default,
    /// Semantic encoder frames mean-pooled to one token, no bridge.
    NoBridge,
    /// Acoustic encoder followed by its own Q-Former bridge.
    AcousticEncoder,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Default, Mode::NoBridge, Mode::AcousticEncoder];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Default => "default",
            Mode::NoBridge => "no_bridge",
            Mode::AcousticEncoder => "acoustic_encoder",
        }
    }

    pub fn encoder_kind(self) -> EncoderKind {
        match self {
            Mode::AcousticEncoder => EncoderKind::Acoustic,
            _ => EncoderKind::Semantic,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Frozen speech → conditioning path.
#[derive(Debug, Clone)]
pub enum Frontend {
    Bridged { encoder: SpeechEncoder, model: Stage1Model },
    Pooled { encoder: SpeechEncoder },
}

/// Column mean of `m` as a `1 x cols` matrix.
pub fn mean_pool(m: &Matrix) -> Matrix {
    let mut out = vec![0f64; m.cols];
    for r in 0..m.rows {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o += v as f64;
        }
    }
    let data = out.into_iter().map(|v| (v / m.rows as f64) as f32).collect();
    Matrix { rows: 1, cols: m.cols, data }
}

impl Frontend {
    /// Loads the encoder (and, when bridged, its Q-Former) for `mode`.
    pub fn load(layout: &Layout, mode: Mode) -> Result<Self> {
        let enc_path = require(&layout.encoder(mode.encoder_kind()))?;
        if mode == Mode::NoBridge {
            return Ok(Frontend::Pooled {
                encoder: SpeechEncoder::load(&enc_path)?,
            });
        }
        let bridge_path = require(&layout.bridge(mode.encoder_kind(), BridgeKind::Qformer))?;
        let encoder = SpeechEncoder::load(&enc_path)?;
        let model = Stage1Model::load(&bridge_path, &encoder)?;
        Ok(Frontend::Bridged { encoder, model })
    }

    pub fn encoder(&self) -> &SpeechEncoder {
        match self {
            Frontend::Bridged { encoder, .. } | Frontend::Pooled { encoder } => encoder,
        }
    }

    pub fn condition(&self, utterance: &SpeechUtterance) -> Result<Conditioning> {
        match self {
            Frontend::Bridged { encoder, model } => Ok(rep_for_generation(&model.map(&encoder.encode(utterance)?)?)),
            Frontend::Pooled { encoder } => Ok(Conditioning {
                tokens: mean_pool(&encoder.encode(utterance)?.frames),
            }),
        }
    }

    /// Parameter checksums of every frozen component.
    pub fn checksums(&self) -> Result<Vec<String>> {
        let mut out = vec![self.encoder().checksum()?];
        if let Frontend::Bridged { model, .. } = self {
            out.push(model.checksum()?);
        }
        Ok(out)
    }
}

/// Training target for one clip in the generator's standardized latent space.
pub fn flow_example(vae: &AudioVae, clip: &AudioClip, cond: Matrix) -> Result<FlowExample> {
    let latent = vae.encode(clip)?;
    let mut z_sigma = latent.z_sigma.clone();
    for r in 0..z_sigma.rows {
        for (v, s) in z_sigma.row_mut(r).iter_mut().zip(&vae.stats.std) {
            *v /= s;
        }
    }
    Ok(FlowExample {
        z_mu: vae.stats.normalize(&latent.z_mu),
        z_sigma,
        cond,
    })
}

/// Samples one clip per condition (`seeds[i]` seeds item `i`) and decodes,
/// cropping to `num_samples` when given. Items are batched by condition
/// length.
pub fn synthesize(
    net: &VelocityNet,
    vae: &AudioVae,
    conds: &[Matrix],
    seeds: &[u64],
    sampler: &SamplerConfig,
    latent_len: usize,
    num_samples: Option<usize>,
) -> Result<Vec<AudioClip>> {
    if conds.len() != seeds.len() {
        return Err(Error::Shape(format!("{} conditions for {} seeds", conds.len(), seeds.len())));
    }
    let mut out: Vec<Option<AudioClip>> = vec![None; conds.len()];
    let mut order: Vec<usize> = (0..conds.len()).collect();
    order.sort_by_key(|&i| conds[i].rows);
    for group in order.chunk_by(|&a, &b| conds[a].rows == conds[b].rows) {
        for batch in group.chunks(SYNTH_BATCH) {
            let (n, c) = (conds[batch[0]].rows, conds[batch[0]].cols);
            let data: Vec<f32> = batch.iter().flat_map(|&i| conds[i].data.iter().copied()).collect();
            let cond = Tensor::from_vec(data, (batch.len(), n, c), &Device::Cpu)?;
            let bs: Vec<u64> = batch.iter().map(|&i| seeds[i]).collect();
            let zs = sample_seeded(net, &cond, &bs, sampler, latent_len, vae.config.latent_dim, DType::F32)?;
            for (&i, z) in batch.iter().zip(zs) {
                out[i] = Some(vae.decode(&vae.stats.denormalize(&z), num_samples)?);
            }
        }
    }
    Ok(out.into_iter().map(|c| c.expect("every item sampled")).collect())
}

/// Frozen front end, fine-tuned generator and VAE of one mode.
pub struct GenerationBundle {
    pub mode: Mode,
    pub frontend: Frontend,
    pub net: VelocityNet,
    pub vae: AudioVae,
}

impl GenerationBundle {
    pub fn load(layout: &Layout, mode: Mode) -> Result<Self> {
        let frontend = Frontend::load(layout, mode)?;
        let (net, _) = VelocityNet::load(&require(&layout.generator(mode))?)?;
        let vae = AudioVae::load(&require(&layout.vae())?)?;
        Ok(Self { mode, frontend, net, vae })
    }

    pub fn generate(
        &self,
        utterances: &[SpeechUtterance],
        seeds: &[u64],
        sampler: &SamplerConfig,
        latent_len: usize,
        num_samples: Option<usize>,
    ) -> Result<Vec<AudioClip>> {
        let conds = utterances
            .iter()
            .map(|u| Ok(self.frontend.condition(u)?.tokens))
            .collect::<Result<Vec<_>>>()?;
        synthesize(&self.net, &self.vae, &conds, seeds, sampler, latent_len, num_samples)
    }
}

/// Reads a speech feature file, generates `latent_len` latent frames with
/// `sampler.seed` and writes them, decoded, as a 16 kHz mono 16-bit WAV.
pub fn generate_from_speech(
    speech: &Path,
    bundle: &GenerationBundle,
    sampler: &SamplerConfig,
    latent_len: usize,
    out: &Path,
) -> Result<AudioClip> {
    let utterance = SpeechUtterance {
        frames: Matrix::read(&require(speech)?)?,
        frame_rate: 0.0,
        source_caption_id: None,
    };
    let clip = bundle
        .generate(&[utterance], &[sampler.seed], sampler, latent_len, None)?
        .remove(0);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_wav(out, &clip.samples, clip.sample_rate)?;
    Ok(clip)
}
