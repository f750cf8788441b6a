//! Synthetic paired corpus: event-class captions, their rendered
//! pseudo-speech, and matching target audio.

mod audio;
mod build;
mod speech;

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{permutation, seeded};

pub use audio::{read_wav, render_audio, write_wav, AudioClip, SAMPLE_RATE};
pub use build::{build_corpus, generate_record, Corpus, CorpusConfig, Record, Split, CONFIG_FILE, MANIFEST};
pub use speech::{render_speech, token_pattern, SpeechConfig, SpeechUtterance, SYLLABLES_PER_TOKEN};

/// How an event class sounds. Parameters are fixed per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Renderer {
    PureTone { freq: f64 },
    Chirp { f0: f64, f1: f64 },
    NoiseBurst { lo: f64, hi: f64 },
    PulseTrain { rate: f64, carrier: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventClass {
    pub id: usize,
    pub name: &'static str,
    pub renderer: Renderer,
    /// The two words of the class's caption phrase.
    pub words: [&'static str; 2],
}

pub const NUM_CLASSES: usize = 8;
pub const MAX_EVENTS: usize = 3;

/// Narrowband sources, with no class sitting on a low odd harmonic of another.
pub const EVENT_CLASSES: [EventClass; NUM_CLASSES] = [
    EventClass { id: 0, name: "tone_440", renderer: Renderer::PureTone { freq: 440.0 }, words: ["steady", "hum"] },
    EventClass { id: 1, name: "chirp_up", renderer: Renderer::Chirp { f0: 620.0, f1: 628.0 }, words: ["rising", "whistle"] },
    EventClass { id: 2, name: "noise_low", renderer: Renderer::NoiseBurst { lo: 960.0, hi: 966.0 }, words: ["low", "rumble"] },
    EventClass { id: 3, name: "pulse_slow", renderer: Renderer::PulseTrain { rate: 2.0, carrier: 1180.0 }, words: ["slow", "beeping"] },
    EventClass { id: 4, name: "tone_1600", renderer: Renderer::PureTone { freq: 1600.0 }, words: ["high", "tone"] },
    EventClass { id: 5, name: "pulse_fast", renderer: Renderer::PulseTrain { rate: 3.0, carrier: 2000.0 }, words: ["quick", "chime"] },
    EventClass { id: 6, name: "chirp_down", renderer: Renderer::Chirp { f0: 2520.0, f1: 2512.0 }, words: ["falling", "siren"] },
    EventClass { id: 7, name: "noise_high", renderer: Renderer::NoiseBurst { lo: 3400.0, hi: 3406.0 }, words: ["hissing", "static"] },
];

pub const CONNECTORS: [&str; 3] = ["and", "with", "then"];

/// Tokens `0..16` are class words (two per class), `16..19` connectors.
pub const VOCAB_SIZE: usize = 2 * NUM_CLASSES + CONNECTORS.len();
/// Reserved embedding slot for tokens outside the vocabulary.
pub const UNK_TOKEN: u32 = VOCAB_SIZE as u32;

pub fn template(class: usize) -> [u32; 2] {
    [2 * class as u32, 2 * class as u32 + 1]
}

pub fn connector_token(i: usize) -> u32 {
    (2 * NUM_CLASSES + i) as u32
}

pub fn token_word(token: u32) -> &'static str {
    let t = token as usize;
    if t < 2 * NUM_CLASSES {
        EVENT_CLASSES[t / 2].words[t % 2]
    } else if t < VOCAB_SIZE {
        CONNECTORS[t - 2 * NUM_CLASSES]
    } else {
        "<unk>"
    }
}

pub fn class_by_name(name: &str) -> Option<&'static EventClass> {
    EVENT_CLASSES.iter().find(|c| c.name == name)
}

/// Textual description of a set of events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<u32>,
    /// Sorted, deduplicated class ids.
    pub events: Vec<usize>,
    pub seed: u64,
}

impl Caption {
    pub fn text(&self) -> String {
        self.tokens.iter().map(|&t| token_word(t)).collect::<Vec<_>>().join(" ")
    }
}

pub(crate) fn canonical_events(events: &[usize]) -> Result<Vec<usize>> {
    let set: BTreeSet<usize> = events.iter().copied().collect();
    if let Some(&bad) = set.iter().find(|&&e| e >= NUM_CLASSES) {
        return Err(Error::Invalid(format!("unknown event class {bad}")));
    }
    Ok(set.into_iter().collect())
}

/// Builds the caption for an event set: class phrases in a seed-chosen order,
/// joined by seed-chosen connectors. Event order in `events` is irrelevant.
pub fn compose_caption(events: &[usize], seed: u64) -> Result<Caption> {
    let events = canonical_events(events)?;
    if events.is_empty() {
        return Err(Error::Invalid("caption needs at least one event".into()));
    }
    if events.len() > MAX_EVENTS {
        return Err(Error::Invalid(format!(
            "{} events exceed the per-caption cap of {MAX_EVENTS}",
            events.len()
        )));
    }
    let mut rng = seeded(seed);
    let order = permutation(&mut rng, events.len());
    let mut tokens = Vec::new();
    for (i, &k) in order.iter().enumerate() {
        if i > 0 {
            tokens.push(connector_token(rng.random_range(0..CONNECTORS.len())));
        }
        tokens.extend(template(events[k]));
    }
    Ok(Caption { tokens, events, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_table_is_dense() {
        for (i, c) in EVENT_CLASSES.iter().enumerate() {
            assert_eq!(c.id, i);
        }
        let words: BTreeSet<_> = (0..VOCAB_SIZE as u32).map(token_word).collect();
        assert_eq!(words.len(), VOCAB_SIZE);
    }

    #[test]
    fn caption_is_deterministic() {
        assert_eq!(compose_caption(&[3], 0).unwrap(), compose_caption(&[3], 0).unwrap());
    }

    #[test]
    fn caption_ignores_event_order() {
        assert_eq!(compose_caption(&[1, 2], 0).unwrap(), compose_caption(&[2, 1], 0).unwrap());
    }

    #[test]
    fn single_event_caption_is_its_template() {
        let c = compose_caption(&[0], 7).unwrap();
        assert_eq!(c.tokens.len(), template(0).len());
        assert_eq!(c.tokens, template(0).to_vec());
        assert_eq!(c.text(), "steady hum");
    }

    #[test]
    fn multi_event_caption_layout() {
        let c = compose_caption(&[5, 2, 7], 3).unwrap();
        assert_eq!(c.events, vec![2, 5, 7]);
        assert_eq!(c.tokens.len(), 3 * 2 + 2);
        for pos in [2, 5] {
            assert!(c.tokens[pos] >= 2 * NUM_CLASSES as u32);
        }
    }

    #[test]
    fn invalid_event_sets_are_rejected() {
        assert!(compose_caption(&[], 0).is_err());
        assert!(compose_caption(&[8], 0).is_err());
        assert!(compose_caption(&[0, 1, 2, 3], 0).is_err());
    }
}
