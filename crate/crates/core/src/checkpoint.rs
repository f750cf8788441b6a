//! Self-describing weight archives.
//!
//! Weights are stored as safetensors (`f32`) with a single metadata entry,
//! `star`, holding a JSON header: format version, model kind, the config the
//! weights were built from, a checksum of the tensors and the checksums of
//! the upstream checkpoints they were trained against.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

/// Upstream artifact name → checksum (or config hash).
pub type Provenance = BTreeMap<String, String>;
const META_KEY: &str = "star";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub checksum: String,
    #[serde(default)]
    pub upstream: BTreeMap<String, String>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config,
            checksum: String::new(),
            upstream: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_upstream(mut self, name: &str, checksum: &str) -> Self {
        self.upstream.insert(name.to_string(), checksum.to_string());
        self
    }

    pub fn with_upstreams(mut self, upstream: &Provenance) -> Self {
        self.upstream.extend(upstream.iter().map(|(k, v)| (k.clone(), v.clone())));
        self
    }

    pub fn with_extra(mut self, key: &str, value: serde_json::Value) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `store` to `path`; fills in `meta.checksum`. Returns the checksum.
pub fn save(path: &Path, store: &ParamStore, mut meta: CheckpointMeta) -> Result<String> {
    meta.checksum = store.checksum()?;
    let tensors = store.tensors_f32()?;
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let bytes = t
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        buffers.push((name, t.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| ckpt_err(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(&meta)?);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| ckpt_err(path, e.to_string()))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(meta.checksum)
}

/// Reads only the header of a checkpoint.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = read_bytes(path)?;
    let (_, md) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    parse_meta(path, md.metadata())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_meta(path: &Path, md: &Option<HashMap<String, String>>) -> Result<CheckpointMeta> {
    let raw = md
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, "no header"))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("format version {} (supported: {FORMAT_VERSION})", meta.format_version),
        ));
    }
    Ok(meta)
}

/// Loads a checkpoint of the expected `kind` into a sealed store of `dtype`.
/// The stored checksum is verified against the tensors.
pub fn load(path: &Path, kind: &str, dtype: DType) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = read_bytes(path)?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let (_, md) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let meta = parse_meta(path, md.metadata())?;
    if meta.kind != kind {
        return Err(ckpt_err(path, format!("holds a {} checkpoint, expected {kind}", meta.kind)));
    }
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(ckpt_err(path, format!("tensor {name} is not f32")));
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(data, view.shape(), &Device::Cpu)?);
    }
    let store = ParamStore::from_tensors(tensors, dtype)?;
    let sum = store.checksum()?;
    if sum != meta.checksum {
        return Err(ckpt_err(path, "checksum mismatch (corrupted weights)"));
    }
    Ok((store, meta))
}

/// SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = read_bytes(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
