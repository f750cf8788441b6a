//! Bridge networks mapping frame-level speech embeddings to a fixed number
//! of semantic slots.
//!
//! The MLP bridge projects every frame and mean-pools over frames (one slot).
//! The Q-Former bridge lets a fixed set of learned queries cross-attend over
//! the frames, so its output shape never depends on the input length.
//! Neither variant uses frame positions: both are functions of the frame set.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{pairwise_mean, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};
use crate::speech_encoder::SpeechEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeKind {
    Mlp,
    Qformer,
}

impl BridgeKind {
    pub fn name(self) -> &'static str {
        match self {
            BridgeKind::Mlp => "mlp",
            BridgeKind::Qformer => "qformer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub kind: BridgeKind,
    /// Semantic slots `N_q` (forced to 1 for the MLP variant).
    pub num_queries: usize,
    /// Semantic width `D_s`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of the incoming speech embedding; set from the encoder.
    pub input_dim: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            kind: BridgeKind::Qformer,
            num_queries: 16,
            width: 64,
            layers: 2,
            heads: 4,
            input_dim: 64,
        }
    }
}

impl BridgeConfig {
    pub fn mlp() -> Self {
        Self {
            kind: BridgeKind::Mlp,
            num_queries: 1,
            ..Self::default()
        }
    }

    pub fn slots(&self) -> usize {
        match self.kind {
            BridgeKind::Mlp => 1,
            BridgeKind::Qformer => self.num_queries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BridgeKind::Mlp && self.num_queries != 1 {
            return Err(Error::Config("the MLP bridge has exactly one slot (num_queries = 1)".into()));
        }
        if self.num_queries == 0 || self.width < 8 {
            return Err(Error::Config("bridge needs num_queries >= 1 and width >= 8".into()));
        }
        if self.kind == BridgeKind::Qformer && (self.layers == 0 || self.heads == 0 || self.width % self.heads != 0) {
            return Err(Error::Config("Q-Former needs layers >= 1 and width divisible by heads".into()));
        }
        Ok(())
    }
}

/// Spoken sound-event semantics: `N_q x D_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticRep {
    pub vectors: Matrix,
}

/// Token sequence consumed by the generator's cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub tokens: Matrix,
}

impl Conditioning {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(self.tokens.to_tensor(dtype, &Device::Cpu)?.unsqueeze(0)?)
    }
}

/// Each semantic slot becomes one conditioning token.
pub fn rep_for_generation(rep: &SemanticRep) -> Conditioning {
    Conditioning {
        tokens: rep.vectors.clone(),
    }
}

pub fn rep_from_conditioning(cond: &Conditioning) -> SemanticRep {
    SemanticRep {
        vectors: cond.tokens.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct MlpBridge {
    fc1: Linear,
    fc2: Linear,
}

impl MlpBridge {
    pub fn new(b: &mut ParamBuilder, cfg: &BridgeConfig) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.pp("fc1"), cfg.input_dim, cfg.width)?,
            fc2: Linear::new(&mut b.pp("fc2"), cfg.width, cfg.width)?,
        })
    }

    /// Per-frame projection of `(B, F, D_e)`, before pooling.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(pairwise_mean(&self.project(x)?, 1)?.unsqueeze(1)?)
    }
}

#[derive(Debug, Clone)]
struct QFormerLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct QFormer {
    queries: Tensor,
    layers: Vec<QFormerLayer>,
}

impl QFormer {
    pub fn new(b: &mut ParamBuilder, cfg: &BridgeConfig) -> Result<Self> {
        let queries = b.get("queries", &[cfg.num_queries, cfg.width], Init::Normal(1.0))?;
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut l = b.pp(&format!("layer{i}"));
                Ok(QFormerLayer {
                    attn: MultiHeadAttention::new(&mut l.pp("attn"), cfg.width, cfg.input_dim, cfg.width, cfg.heads)?,
                    norm1: LayerNorm::new(&mut l.pp("norm1"), cfg.width)?,
                    ff: FeedForward::new(&mut l.pp("ff"), cfg.width, 2 * cfg.width)?,
                    norm2: LayerNorm::new(&mut l.pp("norm2"), cfg.width)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { queries, layers })
    }

    /// Output `(B, N_q, D_s)` plus each layer's attention `(B, H, N_q, F)`.
    pub fn forward_with_attention(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let b = x.dim(0)?;
        let (nq, w) = self.queries.dims2()?;
        let mut h = self.queries.unsqueeze(0)?.broadcast_as((b, nq, w))?.contiguous()?;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, probs) = layer.attn.forward_with_probs(&h, x)?;
            h = layer.norm1.forward(&(h + a)?)?;
            h = layer.norm2.forward(&(&h + layer.ff.forward(&h)?)?)?;
            maps.push(probs);
        }
        Ok((h, maps))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(x)?.0)
    }
}

#[derive(Debug, Clone)]
pub enum Bridge {
    Mlp(MlpBridge),
    Qformer(QFormer),
}

impl Bridge {
    pub fn new(b: &mut ParamBuilder, cfg: &BridgeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            BridgeKind::Mlp => Bridge::Mlp(MlpBridge::new(b, cfg)?),
            BridgeKind::Qformer => Bridge::Qformer(QFormer::new(b, cfg)?),
        })
    }

    /// `(B, F′, D_e)` → `(B, N_q, D_s)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(1)? == 0 {
            return Err(Error::Invalid("bridge input has zero frames".into()));
        }
        match self {
            Bridge::Mlp(m) => m.forward(x),
            Bridge::Qformer(q) => q.forward(x),
        }
    }

    pub fn map(&self, emb: &SpeechEmbedding, dtype: DType) -> Result<SemanticRep> {
        if emb.num_frames() == 0 {
            return Err(Error::Invalid("bridge input has zero frames".into()));
        }
        let out = self.forward(&emb.to_tensor(dtype)?)?.squeeze(0)?;
        Ok(SemanticRep {
            vectors: Matrix::from_tensor(&out)?,
        })
    }
}
