//! DiT-lite velocity network: AdaLN step conditioning, self-attention over
//! latent frames, cross-attention to the conditioning tokens, feed-forward.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::sampler::VelocityField;
use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::nn::{
    plain_layer_norm, positional_table, sinusoidal_features, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention,
    ParamBuilder, ParamStore,
};
use crate::rng::seeded;

pub const CHECKPOINT_KIND: &str = "velocity_net";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VelocityNetConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Width of the conditioning tokens.
    pub cond_width: usize,
    pub time_embed_width: usize,
    pub cond_drop_prob: f64,
    /// Latent width `D`.
    pub latent_dim: usize,
    pub ff_mult: usize,
    /// Latent frames folded into one token.
    pub patch: usize,
}

impl Default for VelocityNetConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            hidden: 64,
            heads: 4,
            cond_width: 64,
            time_embed_width: 64,
            cond_drop_prob: 0.1,
            latent_dim: 16,
            ff_mult: 2,
            patch: 2,
        }
    }
}

impl VelocityNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("velocity net needs at least one block".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        if !(0.0..1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config("cond_drop_prob must lie in [0, 1)".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        if self.time_embed_width % 2 != 0 {
            return Err(Error::Config("time embedding width must be even".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    modulation: Linear,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
}

impl Block {
    fn new(b: &mut ParamBuilder, cfg: &VelocityNetConfig) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            // shift/scale/gate for the self-attention and feed-forward paths,
            // zero-initialized so every block starts as the identity.
            modulation: Linear::zeros(&mut b.pp("modulation"), h, 6 * h)?,
            self_attn: MultiHeadAttention::new(&mut b.pp("self_attn"), h, h, h, cfg.heads)?,
            cross_norm: LayerNorm::new(&mut b.pp("cross_norm"), h)?,
            cross_attn: MultiHeadAttention::new(&mut b.pp("cross_attn"), h, h, h, cfg.heads)?,
            ff: FeedForward::new(&mut b.pp("ff"), h, cfg.ff_mult * h)?,
        })
    }

    /// `x`: `(B, L, h)`; `c`: `(B, h)` step embedding; `cond`: `(B, N, h)`.
    fn forward(&self, x: &Tensor, c: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let m = self.modulation.forward(&c.silu()?)?.unsqueeze(1)?.chunk(6, D::Minus1)?;
        let modulate = |x: &Tensor, shift: &Tensor, scale: &Tensor| -> Result<Tensor> {
            Ok(plain_layer_norm(x, 1e-6)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
        };
        let h = modulate(x, &m[0], &m[1])?;
        let x = (x + self.self_attn.forward(&h, &h)?.broadcast_mul(&m[2])?)?;
        let x = (&x + self.cross_attn.forward(&self.cross_norm.forward(&x)?, cond)?)?;
        let h = modulate(&x, &m[3], &m[4])?;
        Ok((&x + self.ff.forward(&h)?.broadcast_mul(&m[5])?)?)
    }
}

#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub config: VelocityNetConfig,
    store: ParamStore,
    input: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    cond_proj: Linear,
    null_cond: Tensor,
    blocks: Vec<Block>,
    final_modulation: Linear,
    output: Linear,
}

impl VelocityNet {
    fn build(config: VelocityNetConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut rng = seeded(seed);
        let net = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            let input = Linear::new(&mut b.pp("input"), config.patch * config.latent_dim, h)?;
            let time_fc1 = Linear::new(&mut b.pp("time_fc1"), config.time_embed_width, h)?;
            let time_fc2 = Linear::new(&mut b.pp("time_fc2"), h, h)?;
            let cond_proj = Linear::new(&mut b.pp("cond_proj"), config.cond_width, h)?;
            let null_cond = b.get("null_cond", &[1, config.cond_width], Init::Normal(1.0))?;
            let blocks = (0..config.blocks)
                .map(|i| Block::new(&mut b.pp(&format!("block{i}")), &config))
                .collect::<Result<Vec<_>>>()?;
            let final_modulation = Linear::zeros(&mut b.pp("final_modulation"), h, 2 * h)?;
            let output = Linear::zeros(&mut b.pp("output"), h, config.patch * config.latent_dim)?;
            (input, time_fc1, time_fc2, cond_proj, null_cond, blocks, final_modulation, output)
        };
        store.seal();
        let (input, time_fc1, time_fc2, cond_proj, null_cond, blocks, final_modulation, output) = net;
        Ok(Self {
            config,
            store,
            input,
            time_fc1,
            time_fc2,
            cond_proj,
            null_cond,
            blocks,
            final_modulation,
            output,
        })
    }

    pub fn init(config: VelocityNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(config, ParamStore::new(dtype), seed)
    }

    /// Fresh net with the weights of `self` (used to fine-tune a copy).
    pub fn deep_copy(&self) -> Result<Self> {
        Self::build(self.config.clone(), self.store.to_dtype(self.store.dtype())?, 0)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    /// The learned null conditioning, `1 x cond_width`.
    pub fn null_cond(&self) -> &Tensor {
        &self.null_cond
    }

    /// Null conditioning repeated to `(B, n, cond_width)`.
    pub fn null_batch(&self, b: usize, n: usize) -> Result<Tensor> {
        Ok(self
            .null_cond
            .unsqueeze(0)?
            .broadcast_as((b, n, self.config.cond_width))?
            .contiguous()?)
    }

    fn time_embedding(&self, t: &[f64]) -> Result<Tensor> {
        let feats = sinusoidal_features(
            &t.iter().map(|v| v * 1000.0).collect::<Vec<_>>(),
            self.config.time_embed_width,
            10_000.0,
        );
        let x = Tensor::from_vec(feats, (t.len(), self.config.time_embed_width), &Device::Cpu)?.to_dtype(self.dtype())?;
        self.time_fc2.forward(&self.time_fc1.forward(&x)?.silu()?)
    }

    /// `z`: `(B, L, D)`, `t`: `B` times, `cond`: `(B, N, C)`.
    pub fn forward(&self, z: &Tensor, t: &[f64], cond: &Tensor) -> Result<Tensor> {
        let (b, l, d) = z.dims3()?;
        if d != self.config.latent_dim {
            return Err(Error::Shape(format!("latent width {d}, net expects {}", self.config.latent_dim)));
        }
        let (cb, _, cw) = cond.dims3()?;
        if cw != self.config.cond_width {
            return Err(Error::Shape(format!(
                "conditioning width {cw}, net expects {}",
                self.config.cond_width
            )));
        }
        if cb != b || t.len() != b {
            return Err(Error::Shape(format!("batch sizes z {b}, cond {cb}, t {}", t.len())));
        }
        let dtype = self.dtype();
        let p = self.config.patch;
        let tokens = l.div_ceil(p);
        let mut z = z.to_dtype(dtype)?;
        if tokens * p != l {
            z = z.pad_with_zeros(1, 0, tokens * p - l)?;
        }
        let z = z.reshape((b, tokens, p * d))?;
        let pos = positional_table(tokens, self.config.hidden, dtype, &Device::Cpu)?;
        let mut x = self.input.forward(&z)?.broadcast_add(&pos)?;
        let c = self.time_embedding(t)?;
        let cond = self.cond_proj.forward(&cond.to_dtype(dtype)?)?;
        for block in &self.blocks {
            x = block.forward(&x, &c, &cond)?;
        }
        let m = self.final_modulation.forward(&c.silu()?)?.unsqueeze(1)?.chunk(2, D::Minus1)?;
        let x = plain_layer_norm(&x, 1e-6)?.broadcast_mul(&(&m[1] + 1.0)?)?.broadcast_add(&m[0])?;
        let out = self.output.forward(&x)?.reshape((b, tokens * p, d))?;
        if tokens * p == l {
            Ok(out)
        } else {
            Ok(out.narrow(1, 0, l)?)
        }
    }

    pub fn save(&self, path: &Path, meta: CheckpointMeta) -> Result<String> {
        let mut meta = meta;
        meta.kind = CHECKPOINT_KIND.to_string();
        meta.config = serde_json::to_value(&self.config)?;
        checkpoint::save(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (store, meta) = checkpoint::load(path, CHECKPOINT_KIND, DType::F32)?;
        let config: VelocityNetConfig = serde_json::from_value(meta.config.clone())?;
        Ok((Self::build(config, store, 0)?, meta))
    }
}

impl VelocityField for VelocityNet {
    fn velocity(&self, z: &Tensor, t: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        match cond {
            Some(c) => self.forward(z, t, c),
            None => self.forward(z, t, &self.null_batch(z.dim(0)?, 1)?),
        }
    }
}
