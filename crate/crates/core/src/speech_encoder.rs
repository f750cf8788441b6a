//! Frame-level speech encoders.
//!
//! Both encoders share one trunk: a strided 1-D convolution over feature
//! frames followed by pre-norm transformer blocks. The semantic encoder is
//! pretrained by regressing masked input spans from their context; the
//! acoustic encoder squeezes the trunk through a narrow bottleneck and is
//! pretrained to reconstruct its input frames.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, Provenance};
use crate::corpus::{Corpus, Split, SpeechUtterance};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{positional_table, scalar, Init, LayerNorm, Linear, ParamBuilder, ParamStore, TransformerBlock};
use crate::rng::{derive_seed, derive_seed_str, seeded, SeededRng};
use crate::train::{Optimizer, adamw, ensure_finite, length_batches, length_groups, TrainLog};

pub const CHECKPOINT_KIND: &str = "speech_encoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Semantic,
    Acoustic,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Semantic => "semantic",
            EncoderKind::Acoustic => "acoustic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Transformer blocks in the trunk.
    pub depth: usize,
    /// Trunk width; the semantic encoder's embedding width.
    pub width: usize,
    pub heads: usize,
    pub d_speech: usize,
    pub kernel: usize,
    pub downsample: usize,
    /// Fraction of input frames masked during pretraining (semantic only).
    pub mask_ratio: f64,
    pub mask_span: usize,
    /// Embedding width of the acoustic encoder.
    pub bottleneck: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::semantic()
    }
}

impl EncoderConfig {
    pub fn semantic() -> Self {
        Self {
            kind: EncoderKind::Semantic,
            depth: 2,
            width: 64,
            heads: 4,
            d_speech: 40,
            kernel: 4,
            downsample: 2,
            mask_ratio: 0.3,
            mask_span: 4,
            bottleneck: 16,
            epochs: 40,
            lr: 2e-3,
            batch_size: 16,
        }
    }

    pub fn acoustic() -> Self {
        Self {
            kind: EncoderKind::Acoustic,
            ..Self::semantic()
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Semantic => self.width,
            EncoderKind::Acoustic => self.bottleneck,
        }
    }

    /// Output frame count for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.downsample)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("encoder depth must be at least 1".into());
        }
        if self.embed_dim() < 8 || self.width < 8 {
            return bad(format!("encoder embedding width {} below 8", self.embed_dim()));
        }
        if self.downsample == 0 || self.kernel < self.downsample {
            return bad("encoder kernel must cover the downsampling stride".into());
        }
        if self.kind == EncoderKind::Semantic && !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        if self.kind == EncoderKind::Semantic && self.mask_span == 0 {
            return bad("mask_span must be positive".into());
        }
        Ok(())
    }
}

/// Frame-level encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechEmbedding {
    pub frames: Matrix,
    pub downsample_factor: usize,
}

impl SpeechEmbedding {
    pub fn width(&self) -> usize {
        self.frames.cols
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(self.frames.to_tensor(dtype, &Device::Cpu)?.unsqueeze(0)?)
    }
}

/// Gathers overlapping strided windows: `(B, F, d)` → `(B, ceil(F/s), k*d)`.
pub fn strided_windows(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let (b, f, d) = x.dims3()?;
    let out = f.div_ceil(stride);
    let left = (kernel - stride) / 2;
    let total = out * stride + kernel - 1;
    let right = total - f - left;
    let padded = x.pad_with_zeros(1, left, right)?;
    let mut cols = Vec::with_capacity(kernel);
    for j in 0..kernel {
        let s = padded
            .narrow(1, j, out * stride)?
            .reshape((b, out, stride, d))?
            .narrow(2, 0, 1)?
            .squeeze(2)?;
        cols.push(s);
    }
    Ok(Tensor::cat(&cols, 2)?)
}

/// Input frames regrouped per output position: `(B, F, d)` → `(B, F′, s*d)`.
fn grouped_targets(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, f, d) = x.dims3()?;
    let out = f.div_ceil(stride);
    Ok(x.pad_with_zeros(1, 0, out * stride - f)?.reshape((b, out, stride * d))?)
}

#[derive(Debug, Clone)]
struct Trunk {
    front: Linear,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    bottleneck: Option<Linear>,
}

impl Trunk {
    fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&mut b.pp(&format!("block{i}")), cfg.width, cfg.heads, 2))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            front: Linear::new(&mut b.pp("front"), cfg.kernel * cfg.d_speech, cfg.width)?,
            blocks,
            norm: LayerNorm::new(&mut b.pp("norm"), cfg.width)?,
            bottleneck: match cfg.kind {
                EncoderKind::Acoustic => Some(Linear::new(&mut b.pp("bottleneck"), cfg.width, cfg.bottleneck)?),
                EncoderKind::Semantic => None,
            },
        })
    }

    fn forward(&self, x: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
        let windows = strided_windows(x, cfg.kernel, cfg.downsample)?;
        let h = self.front.forward(&windows)?.gelu_erf()?;
        let (_, len, width) = h.dims3()?;
        let pos = positional_table(len, width, h.dtype(), h.device())?;
        let mut h = h.broadcast_add(&pos)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let h = self.norm.forward(&h)?;
        match &self.bottleneck {
            Some(bn) => bn.forward(&h),
            None => Ok(h),
        }
    }
}

/// Pretraining heads; unused at inference.
#[derive(Debug, Clone)]
enum Head {
    MaskedRegression { mask_emb: Tensor, predict: Linear },
    Reconstruction { up: Linear, out: Linear },
}

impl Head {
    fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let target = cfg.downsample * cfg.d_speech;
        Ok(match cfg.kind {
            EncoderKind::Semantic => Head::MaskedRegression {
                mask_emb: b.get("mask_emb", &[cfg.d_speech], Init::Normal(0.1))?,
                predict: Linear::new(&mut b.pp("predict"), cfg.width, target)?,
            },
            EncoderKind::Acoustic => Head::Reconstruction {
                up: Linear::new(&mut b.pp("up"), cfg.bottleneck, cfg.width)?,
                out: Linear::new(&mut b.pp("out"), cfg.width, target)?,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub config: EncoderConfig,
    store: ParamStore,
    trunk: Trunk,
    head: Head,
}

impl SpeechEncoder {
    /// Randomly initialized encoder (and its pretraining head).
    pub fn init(config: EncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = seeded(seed);
        let (trunk, head) = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            (Trunk::new(&mut b.pp("trunk"), &config)?, Head::new(&mut b.pp("head"), &config)?)
        };
        store.seal();
        Ok(Self { config, store, trunk, head })
    }

    pub fn from_store(config: EncoderConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        store.seal();
        let mut rng = seeded(0);
        let (trunk, head) = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            (Trunk::new(&mut b.pp("trunk"), &config)?, Head::new(&mut b.pp("head"), &config)?)
        };
        Ok(Self { config, store, trunk, head })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn kind(&self) -> EncoderKind {
        self.config.kind
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// Batched encoding of `(B, F, d_speech)` frames into `(B, F′, D_e)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, f, d) = x.dims3()?;
        if f == 0 {
            return Err(Error::Invalid("cannot encode an utterance with zero frames".into()));
        }
        if d != self.config.d_speech {
            return Err(Error::Shape(format!(
                "encoder expects {}-wide frames, got {d}",
                self.config.d_speech
            )));
        }
        self.trunk.forward(&x.to_dtype(self.store.dtype())?, &self.config)
    }

    pub fn encode(&self, utterance: &SpeechUtterance) -> Result<SpeechEmbedding> {
        if utterance.num_frames() == 0 {
            return Err(Error::Invalid("cannot encode an utterance with zero frames".into()));
        }
        let x = utterance.frames.to_tensor(self.store.dtype(), &Device::Cpu)?.unsqueeze(0)?;
        let out = self.forward(&x)?.squeeze(0)?;
        Ok(SpeechEmbedding {
            frames: Matrix::from_tensor(&out)?,
            downsample_factor: self.config.downsample,
        })
    }

    pub fn save(&self, path: &Path, log: &TrainLog, upstream: &Provenance) -> Result<String> {
        let meta = CheckpointMeta::new(CHECKPOINT_KIND, serde_json::to_value(&self.config)?)
            .with_upstreams(upstream)
            .with_extra("train_log", serde_json::to_value(log)?);
        checkpoint::save(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load(path, CHECKPOINT_KIND, DType::F32)?;
        let config: EncoderConfig = serde_json::from_value(meta.config)?;
        Self::from_store(config, store)
    }

    /// Pretraining loss on a same-length batch. `mask` is `(B, F, 1)` with
    /// ones on masked frames (semantic only).
    fn pretrain_loss(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let stride = self.config.downsample;
        let target = grouped_targets(x, stride)?;
        match (&self.head, mask) {
            (Head::MaskedRegression { mask_emb, predict }, Some(mask)) => {
                let keep = (1.0 - mask)?;
                let filled = (x.broadcast_mul(&keep)? + mask.broadcast_mul(&mask_emb.reshape((1, 1, ()))?)?)?;
                let pred = predict.forward(&self.trunk.forward(&filled, &self.config)?)?;
                let err = (pred - &target)?.sqr()?.mean_keepdim(2)?;
                // A position counts as masked if any frame it predicts was masked.
                let pos_mask = grouped_targets(mask, stride)?.max_keepdim(2)?;
                let denom = (pos_mask.sum_all()? + 1e-6)?;
                Ok((err * &pos_mask)?.sum_all()?.div(&denom)?)
            }
            (Head::Reconstruction { up, out }, _) => {
                let code = self.trunk.forward(x, &self.config)?;
                let pred = out.forward(&up.forward(&code)?.gelu_erf()?)?;
                Ok((pred - target)?.sqr()?.mean_all()?)
            }
            (Head::MaskedRegression { .. }, None) => Err(Error::Invalid("masked pretraining needs a mask".into())),
        }
    }
}

/// Span mask over `frames` frames covering at least `ratio` of them.
pub fn span_mask(frames: usize, ratio: f64, span: usize, rng: &mut SeededRng) -> Vec<bool> {
    let mut mask = vec![false; frames];
    let target = ((frames as f64 * ratio).round() as usize).clamp(1, frames);
    let span = span.min(frames);
    let mut covered = 0;
    while covered < target {
        let start = rng.random_range(0..=frames - span);
        for m in &mut mask[start..start + span] {
            if !*m {
                *m = true;
                covered += 1;
            }
        }
    }
    mask
}

struct SpeechSet {
    frames: Vec<Matrix>,
}

impl SpeechSet {
    fn load(corpus: &Corpus, split: Split) -> Result<Self> {
        let frames = corpus
            .split(split)
            .into_iter()
            .map(|r| corpus.load_speech(r).map(|u| u.frames))
            .collect::<Result<Vec<_>>>()?;
        if frames.is_empty() {
            return Err(Error::Invalid(format!("corpus split {split:?} is empty")));
        }
        Ok(Self { frames })
    }

    fn lengths(&self) -> Vec<usize> {
        self.frames.iter().map(|m| m.rows).collect()
    }

    fn batch(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let rows = self.frames[idx[0]].rows;
        let cols = self.frames[idx[0]].cols;
        let data: Vec<f32> = idx.iter().flat_map(|&i| self.frames[i].data.iter().copied()).collect();
        Ok(Tensor::from_vec(data, (idx.len(), rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
    }

    fn mask(&self, idx: &[usize], cfg: &EncoderConfig, rng: &mut SeededRng, dtype: DType) -> Result<Tensor> {
        let rows = self.frames[idx[0]].rows;
        let data: Vec<f32> = idx
            .iter()
            .flat_map(|_| span_mask(rows, cfg.mask_ratio, cfg.mask_span, rng))
            .map(|m| if m { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(data, (idx.len(), rows, 1), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

fn pretrain(corpus: &Corpus, config: &EncoderConfig, seed: u64) -> Result<(SpeechEncoder, TrainLog)> {
    let dtype = DType::F32;
    let enc = SpeechEncoder::init(config.clone(), derive_seed_str(seed, "init"), dtype)?;
    let train = SpeechSet::load(corpus, Split::Train)?;
    let val = SpeechSet::load(corpus, Split::Val)?;
    let mut opt = adamw(enc.store.vars(), config.lr, 0.01)?;
    let mut rng = seeded(derive_seed_str(seed, "batches"));
    let masked = config.kind == EncoderKind::Semantic;
    let val_groups = length_groups(&val.lengths(), 64);

    let val_loss = |enc: &SpeechEncoder| -> Result<f64> {
        // Fixed masks so the validation curve is comparable across epochs.
        let mut vrng = seeded(derive_seed_str(seed, "val-masks"));
        let (mut total, mut n) = (0.0, 0usize);
        for g in &val_groups {
            let x = val.batch(g, dtype)?;
            let mask = if masked { Some(val.mask(g, config, &mut vrng, dtype)?) } else { None };
            total += scalar(&enc.pretrain_loss(&x, mask.as_ref())?)? * g.len() as f64;
            n += g.len();
        }
        Ok(total / n as f64)
    };

    let mut log = TrainLog::default();
    let initial = val_loss(&enc)?;
    ensure_finite(initial, "speech encoder pretraining", 0)?;
    log.initial_val = Some(initial);
    let mut best = (f64::INFINITY, enc.store.snapshot()?);
    for epoch in 0..config.epochs {
        let (mut total, mut n) = (0.0, 0usize);
        for batch in length_batches(&train.lengths(), config.batch_size, &mut rng) {
            let x = train.batch(&batch, dtype)?;
            let mask = if masked { Some(train.mask(&batch, config, &mut rng, dtype)?) } else { None };
            let loss = enc.pretrain_loss(&x, mask.as_ref())?;
            let value = scalar(&loss)?;
            ensure_finite(value, "speech encoder pretraining", epoch)?;
            opt.backward_step(&loss)?;
            total += value * batch.len() as f64;
            n += batch.len();
        }
        let v = val_loss(&enc)?;
        ensure_finite(v, "speech encoder pretraining", epoch)?;
        log.train_loss.push(total / n as f64);
        log.val_metric.push(v);
        if v < best.0 {
            best = (v, enc.store.snapshot()?);
            log.best_epoch = epoch;
        }
        log::debug!("{} encoder epoch {epoch}: train {:.5} val {v:.5}", config.kind.name(), total / n as f64);
    }
    log.epochs_run = config.epochs;
    enc.store.restore(&best.1)?;
    Ok((enc, log))
}

/// Masked-span regression pretraining of the semantic encoder.
pub fn pretrain_semantic(corpus: &Corpus, config: &EncoderConfig, seed: u64) -> Result<(SpeechEncoder, TrainLog)> {
    if config.kind != EncoderKind::Semantic {
        return Err(Error::Config("pretrain_semantic needs a semantic encoder config".into()));
    }
    pretrain(corpus, config, derive_seed(seed, 1))
}

/// Bottleneck reconstruction pretraining of the acoustic encoder.
pub fn pretrain_acoustic(corpus: &Corpus, config: &EncoderConfig, seed: u64) -> Result<(SpeechEncoder, TrainLog)> {
    if config.kind != EncoderKind::Acoustic {
        return Err(Error::Config("pretrain_acoustic needs an acoustic encoder config".into()));
    }
    pretrain(corpus, config, derive_seed(seed, 2))
}
