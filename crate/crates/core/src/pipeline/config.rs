//! Run configuration: one TOML document with a section per component.
//! Every key has a default, so an empty file is a valid configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::oracle::OracleConfig;
use crate::audio_vae::VaeConfig;
use crate::bridge::BridgeConfig;
use crate::cascade::AsrConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::flowmatch::{FlowTrainConfig, SamplerConfig, VelocityNetConfig};
use crate::probe::ProbeConfig;
use crate::speech_encoder::EncoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    /// Global seed; every component seed is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Sampling (and ASR corruption) seeds; medians are taken over them.
    pub seeds: Vec<u64>,
    /// ASR substitution rates evaluated for the cascade.
    pub asr_sub_rates: Vec<f64>,
    /// Train the two ablation generators and score them.
    pub ablations: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![11, 12, 13],
            asr_sub_rates: vec![0.0, 0.3],
            ablations: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub trials: usize,
    pub warmup: usize,
    /// Calibrated ASR overhead as a multiple of the end-to-end front-end time.
    pub overhead_factor: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: 30,
            warmup: 5,
            overhead_factor: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusConfig,
    pub semantic_encoder: EncoderConfig,
    pub acoustic_encoder: EncoderConfig,
    pub bridge: BridgeConfig,
    pub probe: ProbeConfig,
    pub vae: VaeConfig,
    pub flow: VelocityNetConfig,
    /// Text-conditioned pretraining of the generator.
    pub tta: FlowTrainConfig,
    /// Speech-conditioned fine-tuning.
    pub stage2: FlowTrainConfig,
    pub sampler: SamplerConfig,
    pub asr: AsrConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            corpus: CorpusConfig::default(),
            semantic_encoder: EncoderConfig::semantic(),
            acoustic_encoder: EncoderConfig::acoustic(),
            bridge: BridgeConfig::default(),
            probe: ProbeConfig::default(),
            vae: VaeConfig::default(),
            flow: VelocityNetConfig::default(),
            tta: FlowTrainConfig::default(),
            stage2: FlowTrainConfig {
                lr: 5e-4,
                ..FlowTrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            asr: AsrConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Applies `section.key = value` overrides; values parse as TOML
    /// (bare words fall back to strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(config_err)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {o:?}")))?;
            let mut table = &mut doc;
            for p in parts {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{p} in {key} is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: RunConfig = doc.try_into().map_err(config_err)?;
        // Unknown keys are dropped by deserialization, so they are absent
        // from the re-serialized document.
        let back: toml::Table = toml::from_str(&cfg.to_toml()?).map_err(config_err)?;
        for o in overrides {
            let key = o.split_once('=').map_or("", |(k, _)| k.trim());
            let mut node = Some(&back);
            let parts: Vec<&str> = key.split('.').collect();
            for (i, p) in parts.iter().enumerate() {
                let v = node.and_then(|t| t.get(*p));
                if v.is_none() {
                    return Err(Error::Config(format!("unknown configuration key {key}")));
                }
                node = if i + 1 < parts.len() { v.and_then(|v| v.as_table()) } else { None };
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.speech.validate()?;
        self.semantic_encoder.validate()?;
        self.acoustic_encoder.validate()?;
        self.vae.validate()?;
        self.flow.validate()?;
        self.sampler.validate()?;
        self.asr.validate()?;
        if self.flow.cond_width != self.bridge.width {
            return Err(Error::Config(format!(
                "flow.cond_width ({}) must equal bridge.width ({})",
                self.flow.cond_width, self.bridge.width
            )));
        }
        if self.semantic_encoder.embed_dim() != self.bridge.width {
            return Err(Error::Config(
                "the semantic encoder width must equal bridge.width so raw frames can condition the generator".into(),
            ));
        }
        if self.flow.latent_dim != self.vae.latent_dim {
            return Err(Error::Config("flow.latent_dim must equal vae.latent_dim".into()));
        }
        if self.bench.trials < 30 {
            return Err(Error::Config(format!("bench.trials = {} (at least 30 required)", self.bench.trials)));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON form of any config value.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(json)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = RunConfig::default()
            .with_overrides(&["sampler.nfe = 8".into(), "run.out_dir=/tmp/x".into(), "eval.seeds=[1]".into()])
            .unwrap();
        assert_eq!(cfg.sampler.nfe, 8);
        assert_eq!(cfg.run.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.eval.seeds, vec![1]);
        assert!(RunConfig::default().with_overrides(&["sampler.nfee=3".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["sampler.nfe=0".into()]).is_err());
        let cfg = RunConfig::default().with_overrides(&["asr.fixed_overhead_ops=1234".into()]).unwrap();
        assert_eq!(cfg.asr.fixed_overhead_ops, Some(1234));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_toml("[sampler]\nguidance_scale = 2.5\n").unwrap();
        assert_eq!(cfg.sampler.guidance_scale, 2.5);
        assert_eq!(cfg.sampler.nfe, 20);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.sampler.nfe = 3;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}
