//! Generation quality of every system against the held-out split, scored by
//! the oracle classifier. Medians are taken over `eval.seeds`; each seed
//! drives both the sampler noise and the ASR corruption.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{synthesize, GenerationBundle, Mode};
use super::metrics::{conditioning_accuracy, frechet_distance, inception_score, kl_metric, FD_EPSILON, POSTERIOR_SMOOTHING};
use super::oracle::{train_oracle, OracleClassifier, OracleOutput};
use super::report::{fmt3, Report, Table};
use super::stages::median;
use super::{require, Pipeline};
use crate::audio_vae::AudioVae;
use crate::cascade::{text_condition, AsrConfig, ToyAsr};
use crate::checkpoint::file_checksum;
use crate::corpus::{AudioClip, Split, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::flowmatch::{SamplerConfig, VelocityNet};
use crate::probe::TextEncoder;
use crate::rng::{derive_seed, derive_seed_str, seeded};

/// Amplitude of the white-noise baseline clips.
pub const NOISE_STD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Lower is better.
    pub frechet_distance: f64,
    /// Lower is better.
    pub kl: f64,
    /// Higher is better.
    pub inception_score: f64,
    /// Higher is better.
    pub conditioning_accuracy: f64,
    /// Among single-event targets, fraction whose top posterior is the target.
    pub single_event_top1: f64,
}

impl Metrics {
    fn median_of(all: &[Metrics]) -> Metrics {
        let m = |f: fn(&Metrics) -> f64| median(&all.iter().map(f).collect::<Vec<_>>());
        Metrics {
            frechet_distance: m(|x| x.frechet_distance),
            kl: m(|x| x.kl),
            inception_score: m(|x| x.inception_score),
            conditioning_accuracy: m(|x| x.conditioning_accuracy),
            single_event_top1: m(|x| x.single_event_top1),
        }
    }

    fn is_finite(&self) -> bool {
        [self.frechet_distance, self.kl, self.inception_score, self.conditioning_accuracy]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub metrics: Metrics,
    /// SHA-256 over the PCM samples of every clip, in record order.
    pub clips_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemEval {
    pub system: String,
    pub per_seed: Vec<SeedEval>,
    pub median: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oracle_heldout_f1: f64,
    pub test_ids: Vec<u64>,
    pub sampler: SamplerConfig,
    pub seeds: Vec<u64>,
    /// Real test audio scored against itself.
    pub real: Metrics,
    pub systems: Vec<SystemEval>,
    pub directions: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn system(&self, name: &str) -> Option<&SystemEval> {
        self.systems.iter().find(|s| s.system == name)
    }
}

pub fn cascade_name(rate: f64) -> String {
    format!("cascade@{rate}")
}

fn digest(clips: &[AudioClip]) -> String {
    let mut h = Sha256::new();
    for c in clips {
        for s in &c.samples {
            h.update(s.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Scores generated clips against the paired real references.
pub fn score(real: &OracleOutput, generated: &OracleOutput, targets: &[Vec<usize>]) -> Result<Metrics> {
    let mut single = (0usize, 0usize);
    for (p, t) in generated.posteriors.iter().zip(targets) {
        if t.len() == 1 {
            single.1 += 1;
            let top = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i);
            if top == Some(t[0]) {
                single.0 += 1;
            }
        }
    }
    let m = Metrics {
        frechet_distance: frechet_distance(&real.embeddings, &generated.embeddings)?,
        kl: kl_metric(&real.posteriors, &generated.posteriors)?,
        inception_score: inception_score(&generated.posteriors)?,
        conditioning_accuracy: conditioning_accuracy(&generated.posteriors, targets)?,
        single_event_top1: if single.1 == 0 { f64::NAN } else { single.0 as f64 / single.1 as f64 },
    };
    if !m.is_finite() {
        return Err(Error::Invalid(format!("non-finite metrics {m:?}")));
    }
    Ok(m)
}

/// Seeded white noise, clipped to the valid range.
pub fn noise_clips(n: usize, num_samples: usize, seed: u64) -> Vec<AudioClip> {
    (0..n)
        .map(|i| {
            let mut rng = seeded(derive_seed(seed, i as u64));
            let samples = (0..num_samples)
                .map(|_| {
                    let v: f64 = rng.sample(rand_distr::StandardNormal);
                    (v * NOISE_STD).clamp(-1.0, 1.0) as f32
                })
                .collect();
            AudioClip {
                samples,
                sample_rate: SAMPLE_RATE,
                events: Vec::new(),
            }
        })
        .collect()
}

pub fn eval_table(r: &EvalReport) -> Table {
    let mut t = Table::new(
        "Generation quality on held-out speech (median over seeds)",
        &["System", "FD ↓", "KL ↓", "IS ↑", "Acc ↑", "Top1 ↑"],
    );
    let mut row = |name: &str, m: &Metrics| {
        t.row(vec![
            name.to_string(),
            fmt3(m.frechet_distance),
            fmt3(m.kl),
            fmt3(m.inception_score),
            fmt3(m.conditioning_accuracy),
            fmt3(m.single_event_top1),
        ]);
    };
    row("real audio", &r.real);
    for s in &r.systems {
        row(&s.system, &s.median);
    }
    t.note(format!("oracle held-out F1 {:.3}; seeds {:?}", r.oracle_heldout_f1, r.seeds));
    t
}

impl Pipeline {
    /// Loads the oracle, training and saving it first if absent.
    pub fn oracle(&self) -> Result<(OracleClassifier, f64)> {
        let path = self.layout.oracle();
        if !path.exists() {
            let corpus = self.corpus()?;
            let (oracle, log, f1) = train_oracle(&corpus, &self.config.oracle, self.seed("oracle"))?;
            let prov = self.provenance(&self.config.oracle, &[("corpus", self.layout.corpus_manifest())])?;
            oracle.save(&path, &log, f1, &prov)?;
        }
        OracleClassifier::load(&path)
    }

    pub(crate) fn evaluate(&self) -> Result<()> {
        let cfg = &self.config;
        let modes = self.modes();
        let bundles = modes
            .iter()
            .map(|&m| GenerationBundle::load(&self.layout, m))
            .collect::<Result<Vec<_>>>()?;
        let text_path = require(&self.layout.text_encoder())?;
        let text = TextEncoder::load(&text_path)?;
        let (tta, _) = VelocityNet::load(&require(&self.layout.tta())?)?;
        let vae = AudioVae::load(&require(&self.layout.vae())?)?;
        let (oracle, oracle_f1) = self.oracle()?;
        let corpus = self.corpus()?;

        let records = corpus.split(Split::Test);
        let utts = records.iter().map(|r| corpus.load_speech(r)).collect::<Result<Vec<_>>>()?;
        let real_clips = records.iter().map(|r| corpus.load_audio(r)).collect::<Result<Vec<_>>>()?;
        let targets: Vec<Vec<usize>> = records.iter().map(|r| r.events.clone()).collect();
        let real = oracle.run_clips(&real_clips)?;
        let real_metrics = score(&real, &real, &targets)?;
        let (len, num) = (self.latent_len(), Some(self.num_samples()));

        let mut per_system: BTreeMap<String, Vec<SeedEval>> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        let mut push = |name: String, seed: u64, clips: &[AudioClip]| -> Result<()> {
            let metrics = score(&real, &oracle.run_clips(clips)?, &targets)?;
            log::info!("evaluate {name} seed {seed}: {metrics:?}");
            if !order.contains(&name) {
                order.push(name.clone());
            }
            per_system.entry(name).or_default().push(SeedEval {
                seed,
                metrics,
                clips_digest: digest(clips),
            });
            Ok(())
        };

        for &eval_seed in &cfg.eval.seeds {
            let sampler = SamplerConfig {
                seed: eval_seed,
                ..cfg.sampler.clone()
            };
            let seeds: Vec<u64> = records.iter().map(|r| derive_seed(eval_seed, r.id)).collect();
            for b in &bundles {
                let clips = b.generate(&utts, &seeds, &sampler, len, num)?;
                push(b.mode.name().to_string(), eval_seed, &clips)?;
            }
            for &rate in &cfg.eval.asr_sub_rates {
                let asr = ToyAsr::new(
                    AsrConfig {
                        substitution_rate: rate,
                        seed: eval_seed,
                        fixed_overhead_ops: Some(0),
                        ..cfg.asr.clone()
                    },
                    corpus.config.speech.clone(),
                )?;
                let conds = records
                    .iter()
                    .zip(&utts)
                    .map(|(r, u)| text_condition(&asr.transcribe(u, r.id)?, &text))
                    .collect::<Result<Vec<_>>>()?;
                let clips = synthesize(&tta, &vae, &conds, &seeds, &sampler, len, num)?;
                push(cascade_name(rate), eval_seed, &clips)?;
            }
            let noise = noise_clips(records.len(), self.num_samples(), derive_seed_str(eval_seed, "noise"));
            push("noise".to_string(), eval_seed, &noise)?;
        }

        let systems = order
            .into_iter()
            .map(|name| {
                let per_seed = per_system.remove(&name).unwrap_or_default();
                let median = Metrics::median_of(&per_seed.iter().map(|s| s.metrics).collect::<Vec<_>>());
                SystemEval {
                    system: name,
                    per_seed,
                    median,
                }
            })
            .collect();
        let directions = BTreeMap::from(
            [
                ("frechet_distance", "lower is better"),
                ("kl", "lower is better"),
                ("inception_score", "higher is better"),
                ("conditioning_accuracy", "higher is better"),
                ("single_event_top1", "higher is better"),
            ]
            .map(|(k, v)| (k.to_string(), v.to_string())),
        );
        let report = EvalReport {
            oracle_heldout_f1: oracle_f1,
            test_ids: records.iter().map(|r| r.id).collect(),
            sampler: cfg.sampler.clone(),
            seeds: cfg.eval.seeds.clone(),
            real: real_metrics,
            systems,
            directions,
            notes: vec![
                format!("Fréchet distance on oracle embeddings with covariances regularized by {FD_EPSILON:e} * I"),
                format!("KL and IS use sigmoid posteriors renormalized to sum to one per clip after adding {POSTERIOR_SMOOTHING:e}"),
                "conditioning accuracy: mean per-clip F1 of events with posterior >= 0.5 against the target events".into(),
                format!("noise baseline: white noise with std {NOISE_STD}, clipped to [-1, 1]"),
                "cascade systems condition the text-pretrained generator on the transcript".into(),
            ],
        };
        let mut upstream = vec![
            ("oracle", self.layout.oracle()),
            ("text_encoder", text_path),
            ("tta", self.layout.tta()),
            ("audio_vae", self.layout.vae()),
        ];
        let names: Vec<String> = modes.iter().map(|m| format!("generator_{}", m.name())).collect();
        for (m, n) in modes.iter().zip(&names) {
            upstream.push((n.as_str(), self.layout.generator(*m)));
        }
        let mut prov = self.provenance(&(&cfg.sampler, &cfg.eval, &cfg.asr, &cfg.oracle), &upstream)?;
        for m in &modes {
            for (k, p) in [
                ("speech_encoder", Some(self.layout.encoder(m.encoder_kind()))),
                ("bridge", (*m != Mode::NoBridge).then(|| self.layout.bridge(m.encoder_kind(), crate::bridge::BridgeKind::Qformer))),
            ] {
                if let Some(p) = p {
                    prov.insert(format!("{k}_{}", m.name()), file_checksum(&p)?);
                }
            }
        }
        eval_table(&report).write(&self.layout.table("evaluate"))?;
        Report {
            kind: "evaluate".into(),
            seed: cfg.run.seed,
            provenance: prov,
            body: report,
        }
        .write(&self.layout.report("evaluate"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_seeded_and_bounded() {
        let a = noise_clips(2, 1000, 4);
        assert_eq!(a, noise_clips(2, 1000, 4));
        assert_ne!(a[0].samples, a[1].samples);
        assert!(a.iter().all(|c| c.samples.iter().all(|s| s.abs() <= 1.0)));
    }

    #[test]
    fn medians_are_per_metric() {
        let mk = |v: f64| Metrics {
            frechet_distance: v,
            kl: 10.0 - v,
            inception_score: v,
            conditioning_accuracy: v / 10.0,
            single_event_top1: v / 10.0,
        };
        let m = Metrics::median_of(&[mk(1.0), mk(5.0), mk(3.0)]);
        assert_eq!(m.frechet_distance, 3.0);
        assert_eq!(m.kl, 7.0);
    }
}
