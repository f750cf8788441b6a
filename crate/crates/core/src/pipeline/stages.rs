//! Training stages and artifact generation.

use std::collections::BTreeMap;
use std::fs;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::generate::{flow_example, Frontend, GenerationBundle, Mode};
use super::report::{fmt3, Report, Table};
use super::{require, Pipeline};
use crate::audio_vae::{snr_db, train_vae, AudioVae};
use crate::bridge::{BridgeConfig, BridgeKind};
use crate::checkpoint::{file_checksum, CheckpointMeta};
use crate::corpus::{build_corpus, write_wav, Corpus, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::flowmatch::{train_flow, FlowExample, VelocityNet};
use crate::probe::{caption_topline, train_stage1, ProbeResult, TextEncoder};
use crate::rng::derive_seed;
use crate::speech_encoder::{pretrain_acoustic, pretrain_semantic, EncoderKind, SpeechEncoder};
use crate::train::TrainLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub records: BTreeMap<String, usize>,
    /// Occurrences of each class over all records.
    pub class_counts: Vec<usize>,
    pub manifest_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_val: Option<f64>,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub first_epoch_train_loss: Option<f64>,
    pub best_epoch_train_loss: Option<f64>,
}

impl TrainSummary {
    pub fn of(log: &TrainLog) -> Self {
        Self {
            initial_val: log.initial_val,
            best_val: log.best_val(),
            best_epoch: log.best_epoch,
            epochs_run: log.epochs_run,
            first_epoch_train_loss: log.train_loss.first().copied(),
            best_epoch_train_loss: log.train_loss.get(log.best_epoch).copied(),
        }
    }

    /// Relative drop from the first epoch's training loss to the kept epoch's.
    pub fn train_loss_drop(&self) -> Option<f64> {
        match (self.first_epoch_train_loss, self.best_epoch_train_loss) {
            (Some(a), Some(b)) if a > 0.0 => Some(1.0 - b / a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Row {
    pub features: String,
    pub bridge: Option<BridgeKind>,
    pub map: f64,
    pub val_map: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub per_class_ap: Vec<Option<f64>>,
}

impl Stage1Row {
    fn of(r: &ProbeResult) -> Self {
        Self {
            features: r.features.clone(),
            bridge: r.bridge_kind,
            map: r.map,
            val_map: r.val_map,
            epochs_run: r.epochs_run,
            best_epoch: r.best_epoch,
            per_class_ap: r.per_class_ap.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub rows: Vec<Stage1Row>,
    pub caption: Stage1Row,
    /// Test mAP, semantic minus acoustic, both with the Q-Former.
    pub semantic_minus_acoustic: f64,
    /// Caption topline minus semantic speech (Q-Former).
    pub caption_minus_semantic: f64,
}

impl Stage1Report {
    pub fn map_of(&self, features: &str, bridge: BridgeKind) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.features == features && r.bridge == Some(bridge))
            .map(|r| r.map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeReport {
    pub train: TrainSummary,
    pub test_snr_db_min: f64,
    pub test_snr_db_median: f64,
    pub test_snr_db_mean: f64,
    pub latent_len: usize,
    pub compression_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub runs: BTreeMap<String, TrainSummary>,
    /// Frozen-component checksums before and after each fine-tuning run.
    pub frozen_unchanged: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedClip {
    pub id: u64,
    pub path: String,
    pub events: Vec<usize>,
    pub seed: u64,
    pub checksum: String,
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Generator-training targets for one split, conditioned by `cond`.
fn flow_split(
    corpus: &Corpus,
    vae: &AudioVae,
    split: Split,
    cond: &dyn Fn(&crate::corpus::Record) -> Result<crate::matrix::Matrix>,
) -> Result<Vec<FlowExample>> {
    corpus
        .split(split)
        .into_iter()
        .map(|r| flow_example(vae, &corpus.load_audio(r)?, cond(r)?))
        .collect()
}

impl Pipeline {
    fn report<T: Serialize + for<'de> Deserialize<'de>>(
        &self,
        name: &str,
        provenance: crate::checkpoint::Provenance,
        body: T,
    ) -> Result<()> {
        Report {
            kind: name.to_string(),
            seed: self.config.run.seed,
            provenance,
            body,
        }
        .write(&self.layout.report(name))
    }

    pub(crate) fn build_corpus(&self) -> Result<()> {
        let corpus = build_corpus(&self.layout.corpus_dir(), &self.config.corpus)?;
        let mut records = BTreeMap::new();
        let mut class_counts = vec![0; NUM_CLASSES];
        for r in &corpus.records {
            *records.entry(format!("{:?}", r.split).to_lowercase()).or_insert(0) += 1;
            for &e in &r.events {
                class_counts[e] += 1;
            }
        }
        let prov = self.provenance(&self.config.corpus, &[])?;
        let body = CorpusSummary {
            records,
            class_counts,
            manifest_checksum: file_checksum(&self.layout.corpus_manifest())?,
        };
        self.report("corpus", prov, body)
    }

    pub(crate) fn pretrain_encoders(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let mut summary = BTreeMap::new();
        let mut prov_all = crate::checkpoint::Provenance::new();
        for (kind, cfg) in [
            (EncoderKind::Semantic, &self.config.semantic_encoder),
            (EncoderKind::Acoustic, &self.config.acoustic_encoder),
        ] {
            if cfg.kind != kind {
                return Err(Error::Config(format!("the {} encoder section has kind {:?}", kind.name(), cfg.kind)));
            }
            let seed = self.seed(&format!("encoder-{}", kind.name()));
            let (enc, log) = match kind {
                EncoderKind::Semantic => pretrain_semantic(&corpus, cfg, seed)?,
                EncoderKind::Acoustic => pretrain_acoustic(&corpus, cfg, seed)?,
            };
            let prov = self.provenance(cfg, &[("corpus", self.layout.corpus_manifest())])?;
            let path = self.layout.encoder(kind);
            enc.save(&path, &log, &prov)?;
            prov_all.insert(format!("{}_encoder", kind.name()), file_checksum(&path)?);
            summary.insert(kind.name().to_string(), TrainSummary::of(&log));
        }
        prov_all.extend(self.provenance(&(&self.config.semantic_encoder, &self.config.acoustic_encoder), &[])?);
        self.report("encoders", prov_all, summary)
    }

    pub(crate) fn stage1(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let probe = &self.config.probe;
        let qformer = BridgeConfig {
            kind: BridgeKind::Qformer,
            ..self.config.bridge.clone()
        };
        let mlp = BridgeConfig {
            kind: BridgeKind::Mlp,
            num_queries: 1,
            ..self.config.bridge.clone()
        };
        let mut rows = Vec::new();
        let mut prov_all = self.provenance(&(&self.config.bridge, probe), &[])?;
        for kind in [EncoderKind::Semantic, EncoderKind::Acoustic] {
            let enc_path = require(&self.layout.encoder(kind))?;
            let encoder = SpeechEncoder::load(&enc_path)?;
            for bcfg in [&qformer, &mlp] {
                let label = format!("stage1-{}-{}", kind.name(), bcfg.kind.name());
                let (model, res) = train_stage1(&encoder, bcfg, &corpus, probe, self.seed(&label))?;
                let prov = self.provenance(
                    &(bcfg, probe),
                    &[("corpus", self.layout.corpus_manifest()), ("speech_encoder_file", enc_path.clone())],
                )?;
                let path = self.layout.bridge(kind, bcfg.kind);
                model.save(&path, &res, &prov)?;
                prov_all.insert(format!("{}_{}", kind.name(), bcfg.kind.name()), file_checksum(&path)?);
                log::info!("stage 1 {label}: test mAP {:.4}", res.map);
                rows.push(Stage1Row::of(&res));
            }
        }
        let (text, res) = caption_topline(&corpus, self.config.bridge.width, probe, self.seed("caption-topline"))?;
        let prov = self.provenance(&(self.config.bridge.width, probe), &[("corpus", self.layout.corpus_manifest())])?;
        text.save(&self.layout.text_encoder(), &res, &prov)?;
        prov_all.insert("text_encoder".into(), file_checksum(&self.layout.text_encoder())?);
        let caption = Stage1Row::of(&res);
        let find = |f: &str| {
            rows.iter()
                .find(|r| r.features == f && r.bridge == Some(BridgeKind::Qformer))
                .map(|r| r.map)
                .unwrap_or(f64::NAN)
        };
        let (sem, ac) = (find("semantic"), find("acoustic"));
        let report = Stage1Report {
            semantic_minus_acoustic: sem - ac,
            caption_minus_semantic: caption.map - sem,
            rows,
            caption,
        };
        stage1_table(&report).write(&self.layout.table("stage1"))?;
        self.report("stage1", prov_all, report)
    }

    pub(crate) fn train_vae(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let (vae, log) = train_vae(&corpus, &self.config.vae, self.seed("vae"))?;
        let prov = self.provenance(&self.config.vae, &[("corpus", self.layout.corpus_manifest())])?;
        vae.save(&self.layout.vae(), &log, &prov)?;
        let mut snr = Vec::new();
        for r in corpus.split(Split::Test) {
            let clip = corpus.load_audio(r)?;
            let rec = vae.decode(&vae.encode(&clip)?.z_mu, Some(clip.samples.len()))?;
            snr.push(snr_db(&clip.samples, &rec.samples));
        }
        let body = VaeReport {
            train: TrainSummary::of(&log),
            test_snr_db_min: snr.iter().copied().fold(f64::INFINITY, f64::min),
            test_snr_db_median: median(&snr),
            test_snr_db_mean: snr.iter().sum::<f64>() / snr.len() as f64,
            latent_len: self.latent_len(),
            compression_ratio: self.config.vae.ratio,
        };
        let prov = self.provenance(&self.config.vae, &[("audio_vae", self.layout.vae())])?;
        self.report("vae", prov, body)
    }

    pub(crate) fn pretrain_tta(&self) -> Result<()> {
        let text_path = require(&self.layout.text_encoder())?;
        let vae_path = require(&self.layout.vae())?;
        let corpus = self.corpus()?;
        let text = TextEncoder::load(&text_path)?;
        let vae = AudioVae::load(&vae_path)?;
        let cond = |r: &crate::corpus::Record| text.condition(&r.tokens);
        let train = flow_split(&corpus, &vae, Split::Train, &cond)?;
        let val = flow_split(&corpus, &vae, Split::Val, &cond)?;
        let net = VelocityNet::init(self.config.flow.clone(), self.seed("tta-init"), DType::F32)?;
        let log = train_flow(&net, &train, &val, &self.config.tta, self.seed("tta"), "text-to-audio pretraining")?;
        let prov = self.provenance(
            &(&self.config.flow, &self.config.tta),
            &[("text_encoder", text_path), ("audio_vae", vae_path)],
        )?;
        let meta = CheckpointMeta::new("", serde_json::Value::Null)
            .with_upstreams(&prov)
            .with_extra("stage", json!("tta"))
            .with_extra("train_log", serde_json::to_value(&log)?);
        net.save(&self.layout.tta(), meta)?;
        let mut prov = prov;
        prov.insert("tta".into(), file_checksum(&self.layout.tta())?);
        let body = FlowReport {
            runs: BTreeMap::from([("tta".to_string(), TrainSummary::of(&log))]),
            frozen_unchanged: BTreeMap::new(),
        };
        self.report("tta", prov, body)
    }

    /// Modes trained by stage 2 and scored by evaluation.
    pub fn modes(&self) -> Vec<Mode> {
        if self.config.eval.ablations {
            Mode::ALL.to_vec()
        } else {
            vec![Mode::Default]
        }
    }

    pub(crate) fn stage2(&self) -> Result<()> {
        let mut body = FlowReport {
            runs: BTreeMap::new(),
            frozen_unchanged: BTreeMap::new(),
        };
        let mut prov_all = self.provenance(&(&self.config.flow, &self.config.stage2), &[])?;
        for mode in self.modes() {
            let frontend = Frontend::load(&self.layout, mode)?;
            let vae_path = require(&self.layout.vae())?;
            let tta_path = require(&self.layout.tta())?;
            let corpus = self.corpus()?;
            let vae = AudioVae::load(&vae_path)?;
            let before = (frontend.checksums()?, vae.checksum()?);
            let cond = |r: &crate::corpus::Record| Ok(frontend.condition(&corpus.load_speech(r)?)?.tokens);
            let train = flow_split(&corpus, &vae, Split::Train, &cond)?;
            let val = flow_split(&corpus, &vae, Split::Val, &cond)?;
            let (net, _) = VelocityNet::load(&tta_path)?;
            let label = format!("stage2-{}", mode.name());
            let log = train_flow(&net, &train, &val, &self.config.stage2, self.seed(&label), "speech-conditioned fine-tuning")?;
            let after = (frontend.checksums()?, vae.checksum()?);
            if before != after {
                return Err(Error::Invalid(format!("{mode}: a frozen component changed during fine-tuning")));
            }
            let mut upstream = vec![
                ("tta", tta_path),
                ("audio_vae", vae_path),
                ("speech_encoder", self.layout.encoder(mode.encoder_kind())),
            ];
            if mode != Mode::NoBridge {
                upstream.push(("bridge", self.layout.bridge(mode.encoder_kind(), BridgeKind::Qformer)));
            }
            let prov = self.provenance(&(mode, &self.config.flow, &self.config.stage2), &upstream)?;
            let meta = CheckpointMeta::new("", serde_json::Value::Null)
                .with_upstreams(&prov)
                .with_extra("stage", json!(mode.name()))
                .with_extra("train_log", serde_json::to_value(&log)?);
            let path = self.layout.generator(mode);
            net.save(&path, meta)?;
            prov_all.insert(format!("generator_{}", mode.name()), file_checksum(&path)?);
            body.runs.insert(mode.name().to_string(), TrainSummary::of(&log));
            body.frozen_unchanged.insert(mode.name().to_string(), true);
        }
        self.report("stage2", prov_all, body)
    }

    /// Writes one generated WAV per test utterance with the default bundle.
    pub(crate) fn generate(&self) -> Result<()> {
        let bundle = GenerationBundle::load(&self.layout, Mode::Default)?;
        let corpus = self.corpus()?;
        let records = corpus.split(Split::Test);
        let utts = records.iter().map(|r| corpus.load_speech(r)).collect::<Result<Vec<_>>>()?;
        let sampler = &self.config.sampler;
        let seeds: Vec<u64> = records.iter().map(|r| derive_seed(sampler.seed, r.id)).collect();
        let clips = bundle.generate(&utts, &seeds, sampler, self.latent_len(), Some(self.num_samples()))?;
        let dir = self.layout.generated_dir(Mode::Default);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut manifest = Vec::new();
        for ((r, clip), seed) in records.iter().zip(&clips).zip(&seeds) {
            let name = format!("{:05}.wav", r.id);
            let path = dir.join(&name);
            write_wav(&path, &clip.samples, clip.sample_rate)?;
            manifest.push(GeneratedClip {
                id: r.id,
                path: format!("generated/{}/{name}", Mode::Default.name()),
                events: r.events.clone(),
                seed: *seed,
                checksum: file_checksum(&path)?,
            });
        }
        let prov = self.provenance(
            sampler,
            &[
                ("generator", self.layout.generator(Mode::Default)),
                ("audio_vae", self.layout.vae()),
                ("speech_encoder", self.layout.encoder(EncoderKind::Semantic)),
                ("bridge", self.layout.bridge(EncoderKind::Semantic, BridgeKind::Qformer)),
            ],
        )?;
        self.report("generate", prov, manifest)
    }
}

pub fn stage1_table(r: &Stage1Report) -> Table {
    let mut t = Table::new("Sound-event probing of speech representations (test mAP)", &["Features", "Bridge", "mAP", "val mAP", "epochs"]);
    for row in r.rows.iter().chain(std::iter::once(&r.caption)) {
        t.row(vec![
            row.features.clone(),
            row.bridge.map_or("-", |b| b.name()).to_string(),
            fmt3(row.map),
            fmt3(row.val_map),
            row.epochs_run.to_string(),
        ]);
    }
    t.note(format!("semantic - acoustic (Q-Former): {:+.3}", r.semantic_minus_acoustic));
    t.note(format!("caption - semantic (Q-Former):  {:+.3}", r.caption_minus_semantic));
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn loss_drop() {
        let log = TrainLog {
            train_loss: vec![2.0, 1.5, 1.0],
            val_metric: vec![1.0, 0.9, 0.8],
            initial_val: None,
            best_epoch: 2,
            epochs_run: 3,
        };
        assert_eq!(TrainSummary::of(&log).train_loss_drop(), Some(0.5));
    }
}
