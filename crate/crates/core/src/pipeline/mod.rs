//! Orchestration: artifact layout, the training stages, generation, the
//! latency benchmark and evaluation.
//!
//! Every checkpoint and report carries a provenance map: the hash of the
//! configuration that produced it plus the checksums of the files it was
//! derived from. Wall-clock measurements live only in `reports/latency.json`
//! and `logs/`, so every other artifact is reproducible byte for byte.

pub mod bench;
pub mod config;
pub mod evaluate;
pub mod generate;
pub mod metrics;
pub mod oracle;
pub mod report;
pub mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use bench::{latency_bench, LatencyStats, PipelineLatency};
pub use config::{config_hash, BenchConfig, EvalConfig, RunConfig, RunSection};
pub use evaluate::{EvalReport, Metrics, SystemEval};
pub use generate::{generate_from_speech, Frontend, GenerationBundle, Mode};
pub use report::Report;

use crate::bridge::BridgeKind;
use crate::checkpoint::{file_checksum, Provenance};
use crate::corpus::{Corpus, MANIFEST, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::derive_seed_str;
use crate::speech_encoder::EncoderKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BuildCorpus,
    PretrainEncoders,
    Stage1,
    TrainVae,
    PretrainTta,
    Stage2,
    Generate,
    Benchmark,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::BuildCorpus,
        Stage::PretrainEncoders,
        Stage::Stage1,
        Stage::TrainVae,
        Stage::PretrainTta,
        Stage::Stage2,
        Stage::Generate,
        Stage::Benchmark,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::BuildCorpus => "build_corpus",
            Stage::PretrainEncoders => "pretrain_encoders",
            Stage::Stage1 => "stage1",
            Stage::TrainVae => "train_vae",
            Stage::PretrainTta => "pretrain_tta",
            Stage::Stage2 => "stage2",
            Stage::Generate => "generate",
            Stage::Benchmark => "benchmark",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Where every artifact of a run lives, relative to `run.out_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn corpus_manifest(&self) -> PathBuf {
        self.corpus_dir().join(MANIFEST)
    }

    pub fn encoder(&self, kind: EncoderKind) -> PathBuf {
        self.root.join("encoders").join(format!("{}.safetensors", kind.name()))
    }

    pub fn bridge(&self, encoder: EncoderKind, bridge: BridgeKind) -> PathBuf {
        self.root
            .join("stage1")
            .join(format!("{}_{}.safetensors", encoder.name(), bridge.name()))
    }

    pub fn text_encoder(&self) -> PathBuf {
        self.root.join("stage1").join("text_encoder.safetensors")
    }

    pub fn vae(&self) -> PathBuf {
        self.root.join("vae").join("audio_vae.safetensors")
    }

    pub fn tta(&self) -> PathBuf {
        self.root.join("flow").join("tta.safetensors")
    }

    pub fn generator(&self, mode: Mode) -> PathBuf {
        self.root.join("flow").join(format!("{}.safetensors", mode.name()))
    }

    pub fn oracle(&self) -> PathBuf {
        self.root.join("oracle").join("oracle.safetensors")
    }

    pub fn generated_dir(&self, mode: Mode) -> PathBuf {
        self.root.join("generated").join(mode.name())
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports_dir().join(format!("{name}.json"))
    }

    pub fn table(&self, name: &str) -> PathBuf {
        self.reports_dir().join(format!("{name}.txt"))
    }

    /// Wall-clock logs; excluded from reproducibility comparisons.
    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }
}

/// Returns `path` if it exists, otherwise a missing-artifact error naming it.
pub fn require(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// A configured run rooted at `config.run.out_dir`.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: RunConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config.run.out_dir);
        Ok(Self { config, layout })
    }

    /// Seed for one component, derived from the global seed.
    pub fn seed(&self, label: &str) -> u64 {
        derive_seed_str(self.config.run.seed, label)
    }

    pub fn num_samples(&self) -> usize {
        (self.config.corpus.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn latent_len(&self) -> usize {
        self.config.vae.latent_len(self.num_samples())
    }

    pub fn corpus(&self) -> Result<Corpus> {
        require(&self.layout.corpus_manifest())?;
        Corpus::load(&self.layout.corpus_dir())
    }

    /// Config hash of `value` (tagged with the global seed) plus the file
    /// checksums of `upstream`, each of which must exist.
    pub fn provenance<T: Serialize>(&self, value: &T, upstream: &[(&str, PathBuf)]) -> Result<Provenance> {
        let mut p = Provenance::new();
        let tagged = serde_json::json!({ "seed": self.config.run.seed, "config": value });
        p.insert("config".into(), config_hash(&tagged)?);
        for (name, path) in upstream {
            p.insert((*name).to_string(), file_checksum(&require(path)?)?);
        }
        Ok(p)
    }

    /// Runs one stage and records its wall-clock time under `logs/`.
    pub fn run(&self, stage: Stage) -> Result<()> {
        log::info!("stage {stage} starting");
        let start = Instant::now();
        match stage {
            Stage::BuildCorpus => self.build_corpus()?,
            Stage::PretrainEncoders => self.pretrain_encoders()?,
            Stage::Stage1 => self.stage1()?,
            Stage::TrainVae => self.train_vae()?,
            Stage::PretrainTta => self.pretrain_tta()?,
            Stage::Stage2 => self.stage2()?,
            Stage::Generate => self.generate()?,
            Stage::Benchmark => self.benchmark()?,
            Stage::Evaluate => self.evaluate()?,
        }
        let secs = start.elapsed().as_secs_f64();
        log::info!("stage {stage} finished in {secs:.1} s");
        self.record_timing(stage, secs)
    }

    pub fn run_all(&self) -> Result<()> {
        Stage::ALL.into_iter().try_for_each(|s| self.run(s))
    }

    fn record_timing(&self, stage: Stage, secs: f64) -> Result<()> {
        let dir = self.layout.logs_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("timings.json");
        let mut timings: BTreeMap<String, f64> = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        timings.insert(stage.name().to_string(), secs);
        fs::write(&path, serde_json::to_string_pretty(&timings)?).map_err(|e| Error::io(&path, e))
    }

    /// Stage timings recorded so far (seconds).
    pub fn timings(&self) -> Result<BTreeMap<String, f64>> {
        let path = require(&self.layout.logs_dir().join("timings.json"))?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
