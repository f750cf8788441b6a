//! Cascaded baseline: a toy ASR turns speech back into caption tokens (with
//! injectable recognition errors), and a text-conditioned generator renders
//! audio from the transcript.

use std::hint::black_box;

use candle_core::DType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio_vae::AudioVae;
use crate::corpus::{token_pattern, AudioClip, Caption, SpeechConfig, SpeechUtterance, NUM_CLASSES, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::flowmatch::{sample, SamplerConfig, VelocityNet};
use crate::matrix::Matrix;
use crate::probe::TextEncoder;
use crate::rng::{derive_seed, seeded};

/// Minimum correlation between a frame block and its best token template.
pub const MIN_CORRELATION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsrConfig {
    pub substitution_rate: f64,
    pub deletion_rate: f64,
    pub seed: u64,
    /// Busy-work units per utterance standing in for decoder cost; `None`
    /// calibrates against the end-to-end front end.
    pub fixed_overhead_ops: Option<u64>,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            substitution_rate: 0.0,
            deletion_rate: 0.0,
            seed: 0,
            fixed_overhead_ops: None,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ok(self.substitution_rate) || !ok(self.deletion_rate) || self.substitution_rate + self.deletion_rate > 1.0 {
            return Err(Error::Config(format!(
                "ASR error rates {} + {} must be probabilities summing to at most 1",
                self.substitution_rate, self.deletion_rate
            )));
        }
        Ok(())
    }
}

/// `ops` rounds of a dependent integer recurrence the optimizer cannot skip.
pub fn busy_work(ops: u64) -> u64 {
    let mut x = black_box(0x2545_F491_4F6C_DD1Du64);
    for _ in 0..black_box(ops) {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
    }
    black_box(x)
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa * bb).sqrt()
}

/// Template-matching recognizer for speech rendered by this crate.
#[derive(Debug, Clone)]
pub struct ToyAsr {
    pub config: AsrConfig,
    speech: SpeechConfig,
    templates: Vec<Matrix>,
}

impl ToyAsr {
    pub fn new(config: AsrConfig, speech: SpeechConfig) -> Result<Self> {
        config.validate()?;
        speech.validate()?;
        let templates = (0..VOCAB_SIZE as u32).map(|t| token_pattern(t, &speech)).collect();
        Ok(Self {
            config,
            speech,
            templates,
        })
    }

    /// Error-free decode: the best-correlating template per token block.
    pub fn decode(&self, utterance: &SpeechUtterance) -> Result<Vec<u32>> {
        let k = self.speech.frames_per_token;
        let f = utterance.num_frames();
        if f == 0 || f % k != 0 || utterance.frames.cols != self.speech.d_speech {
            return Err(Error::Undecodable(format!(
                "{f} frames of width {} do not form whole {k}-frame tokens of width {}",
                utterance.frames.cols, self.speech.d_speech
            )));
        }
        let width = k * self.speech.d_speech;
        (0..f / k)
            .map(|i| {
                let block = &utterance.frames.data[i * width..(i + 1) * width];
                let (best, corr) = self
                    .templates
                    .iter()
                    .enumerate()
                    .map(|(t, m)| (t, pearson(block, &m.data)))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                if corr < MIN_CORRELATION {
                    return Err(Error::Undecodable(format!(
                        "token block {i} matches no template (best correlation {corr:.3})"
                    )));
                }
                Ok(best as u32)
            })
            .collect()
    }

    /// Applies seeded substitutions and deletions to `tokens`.
    pub fn corrupt(&self, tokens: &[u32], utterance_seed: u64) -> Vec<u32> {
        let mut rng = seeded(derive_seed(self.config.seed, utterance_seed));
        let (sub, del) = (self.config.substitution_rate, self.config.deletion_rate);
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let u: f64 = rng.random_range(0.0..1.0);
            if u < sub {
                let other = rng.random_range(0..VOCAB_SIZE as u32 - 1);
                out.push(if other >= t { other + 1 } else { other });
            } else if u < sub + del {
                continue;
            } else {
                out.push(t);
            }
        }
        out
    }

    /// Decode, corrupt, then spend the configured overhead.
    pub fn transcribe(&self, utterance: &SpeechUtterance, utterance_seed: u64) -> Result<Caption> {
        let clean = self.decode(utterance)?;
        let tokens = self.corrupt(&clean, utterance_seed);
        busy_work(self.config.fixed_overhead_ops.unwrap_or(0));
        Ok(caption_from_tokens(tokens, utterance_seed))
    }
}

/// Caption whose event set is read off the class words it contains.
pub fn caption_from_tokens(tokens: Vec<u32>, seed: u64) -> Caption {
    let mut events: Vec<usize> = tokens
        .iter()
        .filter(|&&t| (t as usize) < 2 * NUM_CLASSES)
        .map(|&t| t as usize / 2)
        .collect();
    events.sort_unstable();
    events.dedup();
    Caption { tokens, events, seed }
}

/// Mean-pooled text condition (`1 x width`); unknown tokens use UNK.
pub fn text_condition(caption: &Caption, text: &TextEncoder) -> Result<Matrix> {
    text.condition(&caption.tokens)
}

/// Weights behind the cascade's generation half.
pub struct CascadeBundle<'a> {
    pub text: &'a TextEncoder,
    pub net: &'a VelocityNet,
    pub vae: &'a AudioVae,
    pub latent_len: usize,
    pub num_samples: usize,
}

/// ASR → text condition → sampling → decoding.
pub fn cascade_generate(
    utterance: &SpeechUtterance,
    utterance_seed: u64,
    asr: &ToyAsr,
    bundle: &CascadeBundle,
    sampler: &SamplerConfig,
) -> Result<AudioClip> {
    let caption = asr.transcribe(utterance, utterance_seed)?;
    let cond = text_condition(&caption, bundle.text)?;
    let z = sample(
        bundle.net,
        &cond,
        sampler,
        bundle.latent_len,
        bundle.vae.config.latent_dim,
        DType::F32,
    )?;
    bundle.vae.decode(&bundle.vae.stats.denormalize(&z), Some(bundle.num_samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{compose_caption, render_speech};

    fn asr(sub: f64, del: f64) -> ToyAsr {
        let cfg = AsrConfig {
            substitution_rate: sub,
            deletion_rate: del,
            seed: 5,
            fixed_overhead_ops: Some(0),
        };
        ToyAsr::new(cfg, SpeechConfig::default()).unwrap()
    }

    #[test]
    fn error_free_round_trip() {
        let a = asr(0.0, 0.0);
        for seed in 0..60u64 {
            let events: Vec<usize> = (0..=(seed % 3) as usize).map(|i| (seed as usize + 3 * i) % NUM_CLASSES).collect();
            let cap = compose_caption(&events, seed).unwrap();
            let utt = render_speech(&cap, seed, &SpeechConfig::default()).unwrap();
            let out = a.transcribe(&utt, seed).unwrap();
            assert_eq!(out.tokens, cap.tokens);
            assert_eq!(out.events, cap.events);
        }
    }

    #[test]
    fn full_substitution_changes_every_token() {
        let a = asr(1.0, 0.0);
        let tokens: Vec<u32> = (0..VOCAB_SIZE as u32).collect();
        let out = a.corrupt(&tokens, 1);
        assert_eq!(out.len(), tokens.len());
        assert!(out.iter().zip(&tokens).all(|(a, b)| a != b));
        assert!(out.iter().all(|&t| (t as usize) < VOCAB_SIZE));
    }

    #[test]
    fn substitution_rate_concentrates() {
        let a = asr(0.1, 0.0);
        let tokens: Vec<u32> = (0..1000).map(|i| (i % VOCAB_SIZE) as u32).collect();
        let out = a.corrupt(&tokens, 9);
        let changed = out.iter().zip(&tokens).filter(|(a, b)| a != b).count() as f64 / 1000.0;
        assert!((0.07..=0.13).contains(&changed), "{changed}");
    }

    #[test]
    fn deletions_shorten_the_transcript() {
        let a = asr(0.0, 1.0);
        assert!(a.corrupt(&[1, 2, 3], 0).is_empty());
    }

    #[test]
    fn undecodable_input_is_rejected() {
        let a = asr(0.0, 0.0);
        let utt = |rows: usize, fill: f32| SpeechUtterance {
            frames: Matrix::new(rows, 40, vec![fill; rows * 40]).unwrap(),
            frame_rate: 50.0,
            source_caption_id: None,
        };
        assert!(matches!(a.decode(&utt(12, 0.3)), Err(Error::Undecodable(_))));
        assert!(matches!(a.decode(&utt(16, 0.0)), Err(Error::Undecodable(_))));
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let cfg = AsrConfig { substitution_rate: 0.7, deletion_rate: 0.5, ..AsrConfig::default() };
        assert!(ToyAsr::new(cfg, SpeechConfig::default()).is_err());
    }
}
