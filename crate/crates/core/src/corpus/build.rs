//! Corpus materialization: manifest, WAV targets and speech feature files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{compose_caption, render_audio, render_speech, AudioClip, Caption, SpeechConfig, SpeechUtterance};
use super::{read_wav, write_wav, MAX_EVENTS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, derive_seed_str, permutation, seeded};

pub const MANIFEST: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "corpus.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub speech: SpeechConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_val: 50,
            n_test: 50,
            seed: 1,
            duration_s: 2.0,
            speech: SpeechConfig::default(),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub split: Split,
    pub seed: u64,
    pub tokens: Vec<u32>,
    pub events: Vec<usize>,
    pub speech_path: String,
    pub audio_path: String,
}

impl Record {
    pub fn caption(&self) -> Caption {
        Caption {
            tokens: self.tokens.clone(),
            events: self.events.clone(),
            seed: derive_seed_str(self.seed, "caption"),
        }
    }

    pub fn label_vector(&self) -> Vec<f32> {
        let mut y = vec![0.0; NUM_CLASSES];
        for &e in &self.events {
            y[e] = 1.0;
        }
        y
    }
}

/// Events, caption, speech and audio for one record, derived from its seed only.
pub fn generate_record(id: u64, global_seed: u64, cfg: &CorpusConfig) -> Result<(Caption, SpeechUtterance, AudioClip, u64)> {
    let seed = derive_seed(global_seed, id);
    let mut rng = seeded(derive_seed_str(seed, "events"));
    let n_events = rng.random_range(1..=MAX_EVENTS);
    let events: Vec<usize> = permutation(&mut rng, NUM_CLASSES)[..n_events].to_vec();
    let caption = compose_caption(&events, derive_seed_str(seed, "caption"))?;
    let mut speech = render_speech(&caption, derive_seed_str(seed, "speech"), &cfg.speech)?;
    speech.source_caption_id = Some(id);
    let audio = render_audio(&caption.events, cfg.duration_s, derive_seed_str(seed, "audio"))?;
    Ok((caption, speech, audio, seed))
}

/// Writes the corpus under `dir`. Record `i` belongs to train for
/// `i < n_train`, then val, then test.
pub fn build_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0 {
        return Err(Error::Invalid("every split needs at least one record".into()));
    }
    cfg.speech.validate()?;
    for sub in ["audio", "speech"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    let mut records = Vec::with_capacity(total);
    for id in 0..total as u64 {
        let split = if (id as usize) < cfg.n_train {
            Split::Train
        } else if (id as usize) < cfg.n_train + cfg.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let (caption, speech, audio, seed) = generate_record(id, cfg.seed, cfg)?;
        let speech_path = format!("speech/{id:05}.f32");
        let audio_path = format!("audio/{id:05}.wav");
        speech.frames.write(&dir.join(&speech_path))?;
        write_wav(&dir.join(&audio_path), &audio.samples, audio.sample_rate)?;
        records.push(Record {
            id,
            split,
            seed,
            tokens: caption.tokens,
            events: caption.events,
            speech_path,
            audio_path,
        });
    }
    let manifest = dir.join(MANIFEST);
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&manifest, e))?;
    }
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(Corpus {
        dir: dir.to_path_buf(),
        config: cfg.clone(),
        records,
    })
}

/// A built corpus on disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub config: CorpusConfig,
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        if !manifest.exists() {
            return Err(Error::MissingArtifact(manifest));
        }
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Record>, _>>()?;
        let cfg_path = dir.join(CONFIG_FILE);
        let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config: serde_json::from_str(&cfg_text)?,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn load_speech(&self, r: &Record) -> Result<SpeechUtterance> {
        Ok(SpeechUtterance {
            frames: Matrix::read(&self.dir.join(&r.speech_path))?,
            frame_rate: self.config.speech.frame_rate,
            source_caption_id: Some(r.id),
        })
    }

    pub fn load_audio(&self, r: &Record) -> Result<AudioClip> {
        let (samples, sample_rate) = read_wav(&self.dir.join(&r.audio_path))?;
        Ok(AudioClip {
            samples,
            sample_rate,
            events: r.events.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_train: 100,
            n_val: 10,
            n_test: 10,
            seed: 1,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn build_writes_every_record() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = build_corpus(dir.path(), &small()).unwrap();
        assert_eq!(corpus.records.len(), 120);
        let wavs = fs::read_dir(dir.path().join("audio")).unwrap().count();
        assert_eq!(wavs, 120);
        let loaded = Corpus::load(dir.path()).unwrap();
        assert_eq!(loaded.records, corpus.records);
        assert_eq!(loaded.split(Split::Val).len(), 10);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { n_train: 5, n_val: 2, n_test: 2, ..small() };
        build_corpus(a.path(), &cfg).unwrap();
        build_corpus(b.path(), &cfg).unwrap();
        for f in [MANIFEST, "audio/00003.wav", "speech/00007.f32"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn every_class_appears_in_train() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = build_corpus(dir.path(), &small()).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        for r in corpus.split(Split::Train) {
            for &e in &r.events {
                counts[e] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c >= 1), "{counts:?}");
    }

    #[test]
    fn labels_agree_between_caption_speech_and_audio() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = build_corpus(dir.path(), &CorpusConfig { n_train: 6, n_val: 1, n_test: 1, ..small() }).unwrap();
        for r in &corpus.records {
            let audio = corpus.load_audio(r).unwrap();
            assert_eq!(audio.events, r.events);
            let speech = corpus.load_speech(r).unwrap();
            assert_eq!(speech.num_frames(), r.tokens.len() * 8);
            assert!(!r.events.is_empty() && r.events.len() <= MAX_EVENTS);
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_corpus(dir.path(), &CorpusConfig { n_val: 0, ..small() }).is_err());
    }

    #[test]
    fn unwritable_directory_surfaces_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = build_corpus(&blocker.join("corpus"), &small()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
