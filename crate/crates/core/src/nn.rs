//! Parameter storage and the small set of differentiable layers shared by
//! the encoders, bridges and the velocity network.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{normal_vec_f64, SeededRng};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Named trainable variables in a deterministic (sorted) order.
///
/// A store is either *open* (missing parameters are initialized on first
/// request) or *sealed* (every requested parameter must already exist with
/// the requested shape). Sealed stores come from checkpoints.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    sealed: bool,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            sealed: false,
        }
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self {
            vars,
            dtype,
            device: Device::Cpu,
            sealed: true,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Deep copy converted to `dtype`; the copy shares nothing with `self`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?.copy()?)?);
        }
        Ok(Self {
            vars,
            dtype,
            device: self.device.clone(),
            sealed: self.sealed,
        })
    }

    /// Snapshot of the current values, used for best-epoch restoration.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in snap {
            match self.vars.get(k) {
                Some(v) => v.set(t)?,
                None => return Err(Error::Shape(format!("snapshot holds unknown parameter {k}"))),
            }
        }
        Ok(())
    }

    /// Values of every parameter as `f32`, in name order.
    pub fn tensors_f32(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect()
    }

    /// SHA-256 over names, shapes and `f32` little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.tensors_f32()? {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn param(&mut self, name: String, shape: &[usize], init: Init, rng: &mut SeededRng) -> Result<Tensor> {
        if let Some(v) = self.vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        if self.sealed {
            return Err(Error::Shape(format!("parameter {name} missing from weights")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
            Init::Normal(std) => normal_vec_f64(rng, n).into_iter().map(|v| v * std).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

/// Scoped view of a [`ParamStore`] used while constructing layers.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut SeededRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.param(full, shape, init, self.rng)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Applies `x @ W^T + b` over the last dimension of an arbitrary-rank input.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: b.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: Some(b.get("bias", &[out_dim], Init::Uniform(bound))?),
        })
    }

    pub fn no_bias(b: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: b.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: None,
        })
    }

    /// Zero-initialized projection (adaptive-norm modulation heads).
    pub fn zeros(b: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[out_dim, in_dim], Init::Zeros)?,
            bias: Some(b.get("bias", &[out_dim], Init::Zeros)?),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if in_dim != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear expects width {}, got {in_dim}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / in_dim;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f32,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.get("gamma", &[dim], Init::Ones)?,
            beta: b.get("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::layer_norm_slow(x, &self.gamma, &self.beta, self.eps)?)
    }
}

/// Layer norm without affine parameters; scale and shift come from elsewhere.
pub fn plain_layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let width = x.dim(D::Minus1)? as f64;
    let mean = (x.sum_keepdim(D::Minus1)? / width)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / width)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut b.pp("up"), dim, hidden)?,
            down: Linear::new(&mut b.pp("down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu_erf()?)
    }
}

/// Multi-head attention over batched sequences `(B, L, D)`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut ParamBuilder, q_dim: usize, kv_dim: usize, model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {model_dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut b.pp("q"), q_dim, model_dim)?,
            k: Linear::new(&mut b.pp("k"), kv_dim, model_dim)?,
            v: Linear::new(&mut b.pp("v"), kv_dim, model_dim)?,
            o: Linear::new(&mut b.pp("o"), model_dim, q_dim)?,
            heads,
        })
    }

    pub fn kv_dim(&self) -> usize {
        self.k.in_dim()
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_probs(xq, xkv)?.0)
    }

    /// Returns the output and the attention probabilities `(B, H, Lq, Lk)`.
    pub fn forward_with_probs(&self, xq: &Tensor, xkv: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, lq, _) = xq.dims3()?;
        let (bk, lk, _) = xkv.dims3()?;
        if bk != b {
            return Err(Error::Shape(format!("query batch {b} vs key batch {bk}")));
        }
        let model = self.q.out_dim();
        let hd = model / self.heads;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(xq)?, lq)?;
        let k = split(self.k.forward(xkv)?, lk)?;
        let v = split(self.v.forward(xkv)?, lk)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, model))?;
        Ok((self.o.forward(&ctx)?, probs))
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(b: &mut ParamBuilder, dim: usize, heads: usize, ff_mult: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut b.pp("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut b.pp("attn"), dim, dim, dim, heads)?,
            norm2: LayerNorm::new(&mut b.pp("norm2"), dim)?,
            ff: FeedForward::new(&mut b.pp("ff"), dim, dim * ff_mult)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Sinusoidal features of a scalar position/time, `width` must be even.
pub fn sinusoidal_features(values: &[f64], width: usize, max_period: f64) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(values.len() * width);
    for &p in values {
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            out.push((p * freq).cos());
        }
        for i in 0..half {
            let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
            out.push((p * freq).sin());
        }
    }
    out
}

/// `(len, width)` sinusoidal position table.
pub fn positional_table(len: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let pos: Vec<f64> = (0..len).map(|p| p as f64).collect();
    let data = sinusoidal_features(&pos, width, 10_000.0);
    Ok(Tensor::from_vec(data, (len, width), device)?.to_dtype(dtype)?)
}

/// Sum over `dim` by recursive halving. The result does not depend on which
/// element sits where within each half beyond the tree shape, which keeps
/// pooled outputs stable under frame permutations to within a few ulps.
pub fn pairwise_sum(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    if n == 0 {
        return Err(Error::Shape("pairwise sum over an empty dimension".into()));
    }
    if n == 1 {
        return Ok(x.squeeze(dim)?);
    }
    if n == 2 {
        return Ok((x.narrow(dim, 0, 1)?.squeeze(dim)? + x.narrow(dim, 1, 1)?.squeeze(dim)?)?);
    }
    let half = n / 2;
    let left = pairwise_sum(&x.narrow(dim, 0, half)?, dim)?;
    let right = pairwise_sum(&x.narrow(dim, half, n - half)?, dim)?;
    Ok((left + right)?)
}

pub fn pairwise_mean(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    Ok((pairwise_sum(x, dim)? / n as f64)?)
}

/// Binary cross-entropy with logits, averaged over all entries.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // max(x,0) - x*y + log(1 + exp(-|x|))
    let relu = logits.relu()?;
    let xy = (logits * targets)?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((relu - xy)? + softplus)?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn sealed_store_rejects_missing_and_misshaped_params() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = seeded(0);
        Linear::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("l"), 3, 4).unwrap();
        store.seal();
        let mut rng = seeded(1);
        assert!(Linear::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("l"), 3, 4).is_ok());
        assert!(Linear::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("l"), 5, 4).is_err());
        assert!(Linear::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("m"), 3, 4).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mk = |seed| {
            let mut store = ParamStore::new(DType::F32);
            let mut rng = seeded(seed);
            Linear::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 4).unwrap();
            store
        };
        assert_eq!(mk(3).checksum().unwrap(), mk(3).checksum().unwrap());
        assert_ne!(mk(3).checksum().unwrap(), mk(4).checksum().unwrap());
    }

    #[test]
    fn pairwise_sum_matches_plain_sum() {
        let x = Tensor::arange(0f64, 21.0, &Device::Cpu).unwrap().reshape((7, 3)).unwrap();
        let a = pairwise_sum(&x, 0).unwrap().to_vec1::<f64>().unwrap();
        let b = x.sum(0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[2.0f64, -1.0, 0.3], &dev).unwrap();
        let y = Tensor::new(&[1.0f64, 0.0, 1.0], &dev).unwrap();
        let got = scalar(&bce_with_logits(&logits, &y).unwrap()).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = -((sig(2.0)).ln() + (1.0 - sig(-1.0)).ln() + sig(0.3).ln()) / 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = seeded(2);
        let attn =
            MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 6, 8, 2).unwrap();
        let q = Tensor::from_vec(crate::rng::normal_vec_f64(&mut rng, 2 * 3 * 8), (2, 3, 8), &Device::Cpu).unwrap();
        let kv = Tensor::from_vec(crate::rng::normal_vec_f64(&mut rng, 2 * 5 * 6), (2, 5, 6), &Device::Cpu).unwrap();
        let (out, probs) = attn.forward_with_probs(&q, &kv).unwrap();
        assert_eq!(out.dims(), &[2, 3, 8]);
        for row in probs.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((row - 1.0).abs() < 1e-12);
        }
    }
}
