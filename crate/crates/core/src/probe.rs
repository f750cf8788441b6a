//! Stage-1 probing: trains a bridge plus a linear multi-label head on top of
//! a frozen speech encoder and scores it with mean average precision.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::bridge::{Bridge, BridgeConfig, BridgeKind, SemanticRep};
use crate::checkpoint::{self, CheckpointMeta, Provenance};
use crate::corpus::{Corpus, Split, NUM_CLASSES, UNK_TOKEN, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{bce_with_logits, pairwise_mean, scalar, Init, Linear, ParamBuilder, ParamStore};
use crate::rng::{derive_seed_str, seeded};
use crate::speech_encoder::{EncoderKind, SpeechEmbedding, SpeechEncoder};
use crate::train::{Optimizer, adamw, ensure_finite, length_batches, length_groups, TrainLog};

pub const CHECKPOINT_KIND: &str = "bridge";
pub const TEXT_CHECKPOINT_KIND: &str = "text_encoder";

/// Average precision of one class: mean precision at each positive's rank
/// under descending scores. Ties keep the original index order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Invalid("average precision of an empty ranking".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Per-class AP (`None` for classes without positives) and their mean.
pub fn mean_average_precision(scores: &Matrix, labels: &Matrix) -> Result<(f64, Vec<Option<f64>>)> {
    if scores.rows != labels.rows || scores.cols != labels.cols {
        return Err(Error::Shape(format!(
            "scores {}x{} vs labels {}x{}",
            scores.rows, scores.cols, labels.rows, labels.cols
        )));
    }
    let mut per_class = Vec::with_capacity(scores.cols);
    for c in 0..scores.cols {
        let s: Vec<f64> = (0..scores.rows).map(|r| scores.row(r)[c] as f64).collect();
        let l: Vec<bool> = (0..labels.rows).map(|r| labels.row(r)[c] > 0.5).collect();
        per_class.push(match average_precision(&s, &l) {
            Ok(ap) => Some(ap),
            Err(Error::NoPositives) => None,
            Err(e) => return Err(e),
        });
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::NoPositives);
    }
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, per_class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 3.2e-3,
            max_epochs: 500,
            patience: 20,
            batch_size: 32,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Test-split mAP of the kept weights.
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    /// Validation mAP of the kept weights.
    pub val_map: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// `"caption"` for the text topline.
    pub features: String,
    pub bridge_kind: Option<BridgeKind>,
    pub log: TrainLog,
}

/// Bridge plus linear classification head, trained against one encoder.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub bridge_config: BridgeConfig,
    pub encoder_kind: EncoderKind,
    pub encoder_checksum: String,
    store: ParamStore,
    bridge: Bridge,
    head: Linear,
}

impl Stage1Model {
    fn build(
        bridge_config: BridgeConfig,
        encoder_kind: EncoderKind,
        encoder_checksum: String,
        mut store: ParamStore,
        seed: u64,
    ) -> Result<Self> {
        bridge_config.validate()?;
        let mut rng = seeded(seed);
        let (bridge, head) = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            let bridge = Bridge::new(&mut b.pp("bridge"), &bridge_config)?;
            let head = Linear::new(
                &mut b.pp("head"),
                bridge_config.slots() * bridge_config.width,
                NUM_CLASSES,
            )?;
            (bridge, head)
        };
        store.seal();
        Ok(Self {
            bridge_config,
            encoder_kind,
            encoder_checksum,
            store,
            bridge,
            head,
        })
    }

    pub fn init(encoder: &SpeechEncoder, mut bridge_config: BridgeConfig, seed: u64, dtype: DType) -> Result<Self> {
        bridge_config.input_dim = encoder.embed_dim();
        Self::build(bridge_config, encoder.kind(), encoder.checksum()?, ParamStore::new(dtype), seed)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn bridge(&self) -> &Bridge {
        &self.bridge
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// `(B, F′, D_e)` → `(B, N_q, D_s)`.
    pub fn represent(&self, emb: &Tensor) -> Result<Tensor> {
        self.bridge.forward(&emb.to_dtype(self.store.dtype())?)
    }

    pub fn map(&self, emb: &SpeechEmbedding) -> Result<SemanticRep> {
        self.bridge.map(emb, self.store.dtype())
    }

    pub fn logits(&self, emb: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.represent(emb)?.flatten_from(1)?)
    }

    pub fn save(&self, path: &Path, result: &ProbeResult, upstream: &Provenance) -> Result<String> {
        let meta = CheckpointMeta::new(CHECKPOINT_KIND, serde_json::to_value(&self.bridge_config)?)
            .with_upstreams(upstream)
            .with_upstream("speech_encoder", &self.encoder_checksum)
            .with_extra("encoder_kind", serde_json::to_value(self.encoder_kind)?)
            .with_extra("probe", serde_json::to_value(result)?);
        checkpoint::save(path, &self.store, meta)
    }

    /// Loads a bridge and refuses it unless it was trained against `encoder`.
    pub fn load(path: &Path, encoder: &SpeechEncoder) -> Result<Self> {
        let (store, meta) = checkpoint::load(path, CHECKPOINT_KIND, DType::F32)?;
        let expected = encoder.checksum()?;
        let trained_on = meta.upstream.get("speech_encoder").cloned().unwrap_or_default();
        if trained_on != expected {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("bridge was trained against encoder {trained_on}, got {expected}"),
            });
        }
        let config: BridgeConfig = serde_json::from_value(meta.config)?;
        let kind: EncoderKind = serde_json::from_value(
            meta.extra
                .get("encoder_kind")
                .cloned()
                .ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: "missing encoder kind".into(),
                })?,
        )?;
        Self::build(config, kind, expected, store, 0)
    }
}

/// Learned token-embedding table; a caption's feature is the mean of its
/// token embeddings. Out-of-vocabulary tokens share the UNK row.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    store: ParamStore,
    table: Tensor,
    head: Linear,
    width: usize,
}

impl TextEncoder {
    fn build(mut store: ParamStore, width: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let (table, head) = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            let table = b.get("table", &[VOCAB_SIZE + 1, width], Init::Normal(1.0))?;
            let head = Linear::new(&mut b.pp("head"), width, NUM_CLASSES)?;
            (table, head)
        };
        store.seal();
        Ok(Self { store, table, head, width })
    }

    pub fn init(width: usize, seed: u64, dtype: DType) -> Result<Self> {
        if width < 8 {
            return Err(Error::Config("text embedding width must be at least 8".into()));
        }
        Self::build(ParamStore::new(dtype), width, seed)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    fn ids(tokens: &[u32]) -> Vec<u32> {
        tokens
            .iter()
            .map(|&t| if (t as usize) < VOCAB_SIZE { t } else { UNK_TOKEN })
            .collect()
    }

    /// Mean-pooled embeddings of same-length token rows: `(B, 1, width)`.
    pub fn pooled(&self, batch: &[&[u32]]) -> Result<Tensor> {
        let len = batch.first().map_or(0, |t| t.len());
        if len == 0 || batch.iter().any(|t| t.len() != len) {
            return Err(Error::Invalid("text batch needs equal, non-zero lengths".into()));
        }
        let ids: Vec<u32> = batch.iter().flat_map(|t| Self::ids(t)).collect();
        let ids = Tensor::from_vec(ids, batch.len() * len, &Device::Cpu)?;
        let emb = self.table.index_select(&ids, 0)?.reshape((batch.len(), len, self.width))?;
        Ok(pairwise_mean(&emb, 1)?.unsqueeze(1)?)
    }

    /// Single-caption condition `1 × width`.
    pub fn condition(&self, tokens: &[u32]) -> Result<Matrix> {
        if tokens.is_empty() {
            // An ASR that deleted everything still yields a condition.
            return self.condition(&[UNK_TOKEN]);
        }
        Matrix::from_tensor(&self.pooled(&[tokens])?.squeeze(0)?)
    }

    pub fn logits(&self, batch: &[&[u32]]) -> Result<Tensor> {
        self.head.forward(&self.pooled(batch)?.squeeze(1)?)
    }

    pub fn save(&self, path: &Path, result: &ProbeResult, upstream: &Provenance) -> Result<String> {
        let meta = CheckpointMeta::new(TEXT_CHECKPOINT_KIND, serde_json::json!({ "width": self.width }))
            .with_upstreams(upstream)
            .with_extra("probe", serde_json::to_value(result)?);
        checkpoint::save(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load(path, TEXT_CHECKPOINT_KIND, DType::F32)?;
        let width = meta.config["width"].as_u64().ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "missing width".into(),
        })? as usize;
        Self::build(store, width, 0)
    }
}

/// Features and labels of one split, grouped by feature length.
struct ProbeSet<T> {
    items: Vec<T>,
    lengths: Vec<usize>,
    labels: Matrix,
}

fn split_labels(corpus: &Corpus, split: Split) -> Result<Matrix> {
    let records = corpus.split(split);
    if records.is_empty() {
        return Err(Error::Invalid(format!("corpus split {split:?} is empty")));
    }
    let data: Vec<f32> = records.iter().flat_map(|r| r.label_vector()).collect();
    Matrix::new(records.len(), NUM_CLASSES, data)
}

fn label_batch(labels: &Matrix, idx: &[usize], dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = idx.iter().flat_map(|&i| labels.row(i).iter().copied()).collect();
    Ok(Tensor::from_vec(data, (idx.len(), labels.cols), &Device::Cpu)?.to_dtype(dtype)?)
}

fn embed_split(encoder: &SpeechEncoder, corpus: &Corpus, split: Split) -> Result<ProbeSet<Matrix>> {
    let labels = split_labels(corpus, split)?;
    let utterances = corpus
        .split(split)
        .into_iter()
        .map(|r| corpus.load_speech(r))
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = utterances.iter().map(|u| u.num_frames()).collect();
    let mut items = vec![Matrix::zeros(0, 0); utterances.len()];
    for group in length_groups(&lengths, 64) {
        let (f, d) = (utterances[group[0]].frames.rows, utterances[group[0]].frames.cols);
        let data: Vec<f32> = group.iter().flat_map(|&i| utterances[i].frames.data.iter().copied()).collect();
        let x = Tensor::from_vec(data, (group.len(), f, d), &Device::Cpu)?;
        let out = encoder.forward(&x)?.detach();
        for (k, &i) in group.iter().enumerate() {
            items[i] = Matrix::from_tensor(&out.get(k)?)?;
        }
    }
    Ok(ProbeSet { items, lengths, labels })
}

fn stack(items: &[Matrix], idx: &[usize], dtype: DType) -> Result<Tensor> {
    let (r, c) = (items[idx[0]].rows, items[idx[0]].cols);
    let data: Vec<f32> = idx.iter().flat_map(|&i| items[i].data.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (idx.len(), r, c), &Device::Cpu)?.to_dtype(dtype)?)
}

fn text_split(corpus: &Corpus, split: Split) -> Result<ProbeSet<Vec<u32>>> {
    let labels = split_labels(corpus, split)?;
    let items: Vec<Vec<u32>> = corpus.split(split).iter().map(|r| r.tokens.clone()).collect();
    let lengths = items.iter().map(|t| t.len()).collect();
    Ok(ProbeSet { items, lengths, labels })
}

/// Sigmoid-free scores (logits rank identically) for every item of a split.
fn score_split<T>(set: &ProbeSet<T>, logits: &dyn Fn(&[usize]) -> Result<Tensor>) -> Result<Matrix> {
    let mut scores = Matrix::zeros(set.items.len(), NUM_CLASSES);
    for g in length_groups(&set.lengths, 128) {
        let out = logits(&g)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        for (k, &i) in g.iter().enumerate() {
            scores.row_mut(i).copy_from_slice(&out[k]);
        }
    }
    Ok(scores)
}

/// Shared early-stopping loop. `loss` maps a batch of indices to the BCE
/// loss; `logits_*` score the validation and test splits.
#[allow(clippy::too_many_arguments)]
fn fit<T>(
    store: &ParamStore,
    cfg: &ProbeConfig,
    seed: u64,
    what: &'static str,
    train: &ProbeSet<T>,
    val: &ProbeSet<T>,
    loss: &dyn Fn(&[usize]) -> Result<Tensor>,
    logits_val: &dyn Fn(&[usize]) -> Result<Tensor>,
) -> Result<TrainLog> {
    let mut opt = adamw(store.vars(), cfg.lr, cfg.weight_decay)?;
    let mut rng = seeded(derive_seed_str(seed, "probe-batches"));
    let mut log = TrainLog::default();
    let val_map = || -> Result<f64> { Ok(mean_average_precision(&score_split(val, logits_val)?, &val.labels)?.0) };
    log.initial_val = Some(val_map()?);
    let mut best = (f64::NEG_INFINITY, store.snapshot()?);
    let mut since_best = 0usize;
    for epoch in 0..cfg.max_epochs {
        let (mut total, mut n) = (0.0, 0usize);
        for batch in length_batches(&train.lengths, cfg.batch_size, &mut rng) {
            let l = loss(&batch)?;
            let v = scalar(&l)?;
            ensure_finite(v, what, epoch)?;
            opt.backward_step(&l)?;
            total += v * batch.len() as f64;
            n += batch.len();
        }
        let m = val_map()?;
        log.train_loss.push(total / n as f64);
        log.val_metric.push(m);
        log.epochs_run = epoch + 1;
        if m > best.0 {
            best = (m, store.snapshot()?);
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        log::debug!("{what} epoch {epoch}: loss {:.4} val mAP {m:.4}", total / n as f64);
        if since_best >= cfg.patience {
            break;
        }
    }
    store.restore(&best.1)?;
    Ok(log)
}

fn result<T>(
    log: TrainLog,
    test: &ProbeSet<T>,
    logits: &dyn Fn(&[usize]) -> Result<Tensor>,
    features: &str,
    bridge_kind: Option<BridgeKind>,
) -> Result<ProbeResult> {
    let (map, per_class_ap) = mean_average_precision(&score_split(test, logits)?, &test.labels)?;
    Ok(ProbeResult {
        map,
        per_class_ap,
        val_map: log.best_val().or(log.initial_val).unwrap_or(0.0),
        epochs_run: log.epochs_run,
        best_epoch: log.best_epoch,
        features: features.to_string(),
        bridge_kind,
        log,
    })
}

/// Trains bridge + head on the frozen `encoder`; returns the best-validation
/// weights and their test-split scores.
pub fn train_stage1(
    encoder: &SpeechEncoder,
    bridge_config: &BridgeConfig,
    corpus: &Corpus,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(Stage1Model, ProbeResult)> {
    let dtype = DType::F32;
    let model = Stage1Model::init(encoder, bridge_config.clone(), derive_seed_str(seed, "bridge-init"), dtype)?;
    let train = embed_split(encoder, corpus, Split::Train)?;
    let val = embed_split(encoder, corpus, Split::Val)?;
    let test = embed_split(encoder, corpus, Split::Test)?;

    let loss = |idx: &[usize]| -> Result<Tensor> {
        let logits = model.logits(&stack(&train.items, idx, dtype)?)?;
        bce_with_logits(&logits, &label_batch(&train.labels, idx, dtype)?)
    };
    let on_val = |idx: &[usize]| model.logits(&stack(&val.items, idx, dtype)?);
    let on_test = |idx: &[usize]| model.logits(&stack(&test.items, idx, dtype)?);
    let log = fit(model.store(), cfg, seed, "stage-1 probe", &train, &val, &loss, &on_val)?;
    let res = result(log, &test, &on_test, encoder.kind().name(), Some(bridge_config.kind))?;
    Ok((model, res))
}

/// Same protocol on mean caption-token embeddings instead of speech.
pub fn caption_topline(corpus: &Corpus, width: usize, cfg: &ProbeConfig, seed: u64) -> Result<(TextEncoder, ProbeResult)> {
    let dtype = DType::F32;
    let text = TextEncoder::init(width, derive_seed_str(seed, "text-init"), dtype)?;
    let train = text_split(corpus, Split::Train)?;
    let val = text_split(corpus, Split::Val)?;
    let test = text_split(corpus, Split::Test)?;
    let refs = |set: &ProbeSet<Vec<u32>>, idx: &[usize]| -> Vec<Vec<u32>> { idx.iter().map(|&i| set.items[i].clone()).collect() };
    let logits_of = |set: &ProbeSet<Vec<u32>>, idx: &[usize]| -> Result<Tensor> {
        let rows = refs(set, idx);
        let batch: Vec<&[u32]> = rows.iter().map(|r| r.as_slice()).collect();
        text.logits(&batch)
    };
    let loss = |idx: &[usize]| -> Result<Tensor> {
        bce_with_logits(&logits_of(&train, idx)?, &label_batch(&train.labels, idx, dtype)?)
    };
    let log = fit(text.store(), cfg, seed, "caption probe", &train, &val, &loss, &|idx| logits_of(&val, idx))?;
    let res = result(log, &test, &|idx| logits_of(&test, idx), "caption", None)?;
    Ok((text, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    /// Walks cut-off ranks k = 1..n; whenever the item at rank k is positive,
    /// adds precision@k computed by counting positives ranked at or above k.
    fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
        let n = scores.len();
        // items ranked ahead: higher score, or equal score and lower index
        let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
        let ranks: Vec<usize> = (0..n).map(rank).collect();
        let mut total = 0.0;
        for k in 1..=n {
            let at_k = (0..n).find(|&i| ranks[i] == k).unwrap();
            if labels[at_k] {
                let above = (0..n).filter(|&j| labels[j] && ranks[j] <= k).count();
                total += above as f64 / k as f64;
            }
        }
        total / labels.iter().filter(|&&l| l).count() as f64
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.7], &[true, true, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(matches!(average_precision(&[0.1, 0.2], &[false, false]), Err(Error::NoPositives)));
    }

    #[test]
    fn worst_ranking_ap() {
        let labels = [true, true, false, false];
        let scores: Vec<f64> = labels.iter().map(|&l| if l { 0.0 } else { 1.0 }).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - (1.0 / 3.0 + 2.0 / 4.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ap_matches_brute_force_with_ties() {
        let mut rng = seeded(8);
        for _ in 0..200 {
            // Coarse scores force ties.
            let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0..10) as f64 / 10.0).collect();
            let mut labels: Vec<bool> = (0..50).map(|_| rng.random_bool(0.3)).collect();
            labels[rng.random_range(0..50)] = true;
            assert_eq!(average_precision(&scores, &labels).unwrap(), brute_ap(&scores, &labels));
        }
    }

    #[test]
    fn map_excludes_classes_without_positives() {
        let labels = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let scores = Matrix::new(3, 2, vec![0.2, 0.5, 0.9, 0.1, 0.4, 0.3]).unwrap();
        let (map, per) = mean_average_precision(&scores, &labels).unwrap();
        assert_eq!(per[1], None);
        let only = Matrix::new(3, 1, vec![1.0, 0.0, 1.0]).unwrap();
        let only_s = Matrix::new(3, 1, vec![0.2, 0.9, 0.4]).unwrap();
        assert_eq!(map, mean_average_precision(&only_s, &only).unwrap().0);
        assert!(mean_average_precision(&scores, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn perfect_scores_give_unit_map() {
        let labels = Matrix::new(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(mean_average_precision(&labels, &labels).unwrap().0, 1.0);
    }

    #[test]
    fn text_condition_of_repeated_token_is_its_embedding() {
        let text = TextEncoder::init(16, 4, DType::F32).unwrap();
        let c = text.condition(&[3, 3, 3]).unwrap();
        let row = text.table.get(3).unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in c.data.iter().zip(&row) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(text.condition(&[3, 3, 3]).unwrap(), c);
    }

    #[test]
    fn text_condition_shift_under_one_substitution() {
        let text = TextEncoder::init(16, 4, DType::F64).unwrap();
        let clean = [0u32, 16, 5, 17, 9];
        let mut noisy = clean;
        noisy[2] = 12;
        let a = text.condition(&clean).unwrap();
        let b = text.condition(&noisy).unwrap();
        let table = text.table.to_vec2::<f64>().unwrap();
        for j in 0..16 {
            let want = (table[12][j] - table[5][j]) / 5.0;
            assert!(((b.data[j] - a.data[j]) as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let text = TextEncoder::init(16, 4, DType::F32).unwrap();
        assert_eq!(text.condition(&[999]).unwrap(), text.condition(&[UNK_TOKEN]).unwrap());
        assert_eq!(text.condition(&[]).unwrap(), text.condition(&[UNK_TOKEN]).unwrap());
    }
}
