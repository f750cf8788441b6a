//! Deterministic pseudo-speech renderer.
//!
//! Every token is spoken as a sequence of four syllables drawn from one shared
//! inventory; tokens differ only in syllable order. Each syllable is a short
//! run of pseudo-formant spectral frames. Per-utterance speaker traits (gain,
//! formant shift, spectral tilt) and low-amplitude noise come from the seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Caption;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed_str, normal_vec, seeded};

pub const SYLLABLES_PER_TOKEN: usize = 4;

/// Formant centers (in bins of a 40-bin frame) at the onset and offset of each syllable.
const SYLLABLE_FORMANTS: [[[f64; 3]; 2]; SYLLABLES_PER_TOKEN] = [
    [[4.0, 14.0, 27.0], [5.0, 16.0, 28.0]],
    [[7.0, 11.0, 31.0], [8.0, 12.0, 33.0]],
    [[3.0, 19.0, 25.0], [2.5, 21.0, 24.0]],
    [[9.0, 17.0, 35.0], [10.0, 15.0, 36.0]],
];
const FORMANT_GAINS: [f64; 3] = [1.0, 0.7, 0.5];
const FORMANT_WIDTH: f64 = 1.5;
const REFERENCE_BINS: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeechConfig {
    /// Frames per token (`k`); a multiple of the four syllables.
    pub frames_per_token: usize,
    /// Feature width per frame.
    pub d_speech: usize,
    /// Standard deviation of the additive frame noise.
    pub noise_amp: f64,
    /// Scale of per-speaker variation (0 renders every speaker identically).
    pub speaker_variation: f64,
    pub frame_rate: f64,
}

impl Default for SpeechConfig {
    fn default() -> Self {
        Self {
            frames_per_token: 8,
            d_speech: 40,
            noise_amp: 0.05,
            speaker_variation: 1.0,
            frame_rate: 50.0,
        }
    }
}

impl SpeechConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_token == 0 || self.frames_per_token % SYLLABLES_PER_TOKEN != 0 {
            return Err(Error::Config(format!(
                "frames_per_token must be a positive multiple of {SYLLABLES_PER_TOKEN}"
            )));
        }
        if self.d_speech < 16 {
            return Err(Error::Config("d_speech must be at least 16".into()));
        }
        if !(self.noise_amp >= 0.0) {
            return Err(Error::Config("noise_amp must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rendered feature frames of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechUtterance {
    pub frames: Matrix,
    pub frame_rate: f64,
    pub source_caption_id: Option<u64>,
}

impl SpeechUtterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows
    }
}

#[derive(Debug, Clone, Copy)]
struct Speaker {
    gain: f64,
    shift: f64,
    tilt: f64,
}

impl Speaker {
    const NEUTRAL: Speaker = Speaker {
        gain: 1.0,
        shift: 0.0,
        tilt: 0.0,
    };

    fn from_seed(seed: u64, variation: f64) -> Self {
        let mut rng = seeded(derive_seed_str(seed, "speaker"));
        let mut u = || rng.random_range(-1.0..=1.0) * variation;
        Speaker {
            gain: 1.0 + 0.2 * u(),
            shift: 0.5 * u(),
            tilt: 0.01 * u(),
        }
    }
}

/// The 24 orderings of four syllables, lexicographic.
fn syllable_orders() -> Vec<[usize; SYLLABLES_PER_TOKEN]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    if p.iter().all(|&x| !std::mem::replace(&mut seen[x], true)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

fn token_syllables(token: u32) -> [usize; SYLLABLES_PER_TOKEN] {
    let orders = syllable_orders();
    // 5 is coprime with 24, so distinct tokens get distinct orders.
    orders[(token as usize * 5 + 3) % orders.len()]
}

fn render_token(token: u32, cfg: &SpeechConfig, speaker: Speaker, out: &mut [f32]) {
    let d = cfg.d_speech;
    let per_syl = cfg.frames_per_token / SYLLABLES_PER_TOKEN;
    let scale = d as f64 / REFERENCE_BINS;
    for (s_idx, &syl) in token_syllables(token).iter().enumerate() {
        for f in 0..per_syl {
            let w = if per_syl > 1 { f as f64 / (per_syl - 1) as f64 } else { 0.0 };
            let row = s_idx * per_syl + f;
            let frame = &mut out[row * d..(row + 1) * d];
            for (m, gain) in FORMANT_GAINS.iter().enumerate() {
                let [on, off] = SYLLABLE_FORMANTS[syl];
                let center = ((1.0 - w) * on[m] + w * off[m] + speaker.shift) * scale;
                let width = FORMANT_WIDTH * scale;
                for (j, v) in frame.iter_mut().enumerate() {
                    let z = (j as f64 - center) / width;
                    *v += (gain * (-0.5 * z * z).exp()) as f32;
                }
            }
            let mid = (d as f64 - 1.0) / 2.0;
            for (j, v) in frame.iter_mut().enumerate() {
                *v = (*v as f64 * speaker.gain * (1.0 + speaker.tilt * (j as f64 - mid) / scale)) as f32;
            }
        }
    }
}

/// Clean, speaker-neutral `k x d_speech` frames of a token.
pub fn token_pattern(token: u32, cfg: &SpeechConfig) -> Matrix {
    let mut m = Matrix::zeros(cfg.frames_per_token, cfg.d_speech);
    render_token(token, cfg, Speaker::NEUTRAL, &mut m.data);
    m
}

/// Renders a caption as `k` frames per token plus seeded noise.
pub fn render_speech(caption: &Caption, seed: u64, cfg: &SpeechConfig) -> Result<SpeechUtterance> {
    cfg.validate()?;
    if caption.tokens.is_empty() {
        return Err(Error::Invalid("caption has no tokens".into()));
    }
    if let Some(t) = caption.tokens.iter().find(|&&t| t as usize >= super::VOCAB_SIZE) {
        return Err(Error::Invalid(format!("token {t} cannot be spoken")));
    }
    let k = cfg.frames_per_token;
    let d = cfg.d_speech;
    let speaker = Speaker::from_seed(seed, cfg.speaker_variation);
    let mut frames = Matrix::zeros(k * caption.tokens.len(), d);
    for (i, &tok) in caption.tokens.iter().enumerate() {
        render_token(tok, cfg, speaker, &mut frames.data[i * k * d..(i + 1) * k * d]);
    }
    if cfg.noise_amp > 0.0 {
        let mut rng = seeded(derive_seed_str(seed, "frame-noise"));
        for (v, n) in frames.data.iter_mut().zip(normal_vec(&mut rng, k * caption.tokens.len() * d)) {
            *v += (cfg.noise_amp * n as f64) as f32;
        }
    }
    Ok(SpeechUtterance {
        frames,
        frame_rate: cfg.frame_rate,
        source_caption_id: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{compose_caption, VOCAB_SIZE};

    #[test]
    fn token_orders_are_distinct_and_share_the_syllable_bag() {
        let orders: std::collections::BTreeSet<_> = (0..VOCAB_SIZE as u32).map(token_syllables).collect();
        assert_eq!(orders.len(), VOCAB_SIZE);
        for o in orders {
            let mut s = o;
            s.sort_unstable();
            assert_eq!(s, [0, 1, 2, 3]);
        }
    }

    #[test]
    fn frame_count_is_k_per_token() {
        let caption = Caption { tokens: vec![0, 16, 2, 3, 17], events: vec![0, 1], seed: 0 };
        let u = render_speech(&caption, 1, &SpeechConfig::default()).unwrap();
        assert_eq!(u.num_frames(), 40);
        assert_eq!(u.frames.cols, 40);
        assert!(u.frames.is_finite());
    }

    #[test]
    fn rendering_is_deterministic() {
        let c = compose_caption(&[1, 4, 6], 5).unwrap();
        let cfg = SpeechConfig::default();
        assert_eq!(render_speech(&c, 9, &cfg).unwrap(), render_speech(&c, 9, &cfg).unwrap());
        assert_ne!(render_speech(&c, 9, &cfg).unwrap(), render_speech(&c, 10, &cfg).unwrap());
    }

    #[test]
    fn one_token_change_only_touches_its_block() {
        let cfg = SpeechConfig { noise_amp: 0.0, ..SpeechConfig::default() };
        let a = Caption { tokens: vec![0, 1, 16, 4, 5], events: vec![0, 2], seed: 0 };
        let mut b = a.clone();
        b.tokens[3] = 10;
        let ua = render_speech(&a, 4, &cfg).unwrap();
        let ub = render_speech(&b, 4, &cfg).unwrap();
        let k = cfg.frames_per_token;
        for r in 0..ua.num_frames() {
            let same = ua.frames.row(r) == ub.frames.row(r);
            assert_eq!(same, r / k != 3, "row {r}");
        }
    }

    #[test]
    fn unknown_tokens_are_not_rendered() {
        let c = Caption { tokens: vec![super::super::UNK_TOKEN], events: vec![0], seed: 0 };
        assert!(render_speech(&c, 0, &SpeechConfig::default()).is_err());
    }
}
