//! Single-file container: a JSON manifest followed by named `f32` tensors.
//!
//! Layout (little-endian): magic `DORMCKPT`, `u32` version, `u32` manifest
//! length, manifest bytes, `u32` tensor count, then per tensor `u32` name
//! length, name, `u32` rank, `u64` dims, row-major `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"DORMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large: {n}")))
}

impl Container {
    pub fn new(manifest: serde_json::Value) -> Self {
        Container {
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.tensors.push((name.into(), tensor.cast()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(manifest.len(), "manifest")?.to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&len_u32(name.len(), "tensor name")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.shape().len(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mlen = r.u32()? as usize;
        let manifest = serde_json::from_slice(r.take(mlen)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Container { manifest, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        // Write then rename, so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Manifest of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: String,
    pub config: ModelConfig,
    pub char_vocab_sha256: String,
    pub phoneme_vocab_sha256: String,
    #[serde(default)]
    pub step: u64,
    /// Free-form state owned by the caller (e.g. the trainer).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const MODEL_KIND: &str = "model";
pub const ATTENTION_KIND: &str = "attention";

/// Writes the model under `param.<name>` plus any `extra` tensors.
pub fn model_container<T: Scalar>(
    model: &Model<T>,
    manifest: &ModelManifest,
    extra: &[(String, &Tensor<T>)],
) -> Result<Container> {
    let value = serde_json::to_value(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut c = Container::new(value);
    for (name, t) in model.params.iter() {
        c.push(format!("param.{name}"), t);
    }
    for (name, t) in extra {
        c.push(name.clone(), *t);
    }
    Ok(c)
}

/// A model, its manifest and the container's non-parameter tensors.
pub type LoadedModel<T> = (Model<T>, ModelManifest, Vec<(String, Tensor<T>)>);

/// Reads a model checkpoint, validating every parameter shape against the
/// stored configuration. Non-parameter tensors are returned separately.
pub fn load_model<T: Scalar>(c: &Container) -> Result<LoadedModel<T>> {
    let manifest: ModelManifest =
        serde_json::from_value(c.manifest.clone()).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut params = Vec::new();
    let mut rest = Vec::new();
    for (name, t) in &c.tensors {
        match name.strip_prefix("param.") {
            Some(p) => params.push((p.to_string(), t.cast())),
            None => rest.push((name.clone(), t.cast())),
        }
    }
    let params = ModelParams::from_named(&manifest.config, params)?;
    Ok((Model::from_params(manifest.config.clone(), params)?, manifest, rest))
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>, manifest: &ModelManifest) -> Result<()> {
    model_container(model, manifest, &[])?.write(path)
}

pub fn read_model<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, ModelManifest)> {
    let (m, manifest, _) = load_model(&Container::read(path)?)?;
    Ok((m, manifest))
}
