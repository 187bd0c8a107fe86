//! Model checkpoint container.
//!
//! Layout: magic `HRM1`, little-endian `u32` metadata length, UTF-8 JSON
//! metadata, then for every tensor listed in the metadata: `u32` name
//! length, name bytes, `u32` rows, `u32` cols, `rows * cols` little-endian
//! `f32` values in row-major order.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamTensor, Tensor};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 4] = b"HRM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Enricher,
    Recommender,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Enricher => "enricher",
            ModelKind::Recommender => "recommender",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model_kind: ModelKind,
    /// Embedding table height (real items + PAD + MASK).
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Echo of the training configuration.
    pub training: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    meta: &CheckpointMeta,
    params: &[&ParamTensor<T>],
) -> Result<()> {
    let mut meta = meta.clone();
    meta.format_version = FORMAT_VERSION;
    meta.tensors = params
        .iter()
        .map(|p| TensorMeta { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols() })
        .collect();
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for p in params {
        buf.clear();
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            let f = v.to_f32().unwrap_or(f32::NAN);
            buf.extend_from_slice(&f.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint while reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_exact_vec(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Reads a checkpoint, checking every tensor against the metadata listing.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointMeta, Vec<(String, Tensor<f32>)>)> {
    if read_exact_vec(&mut r, 4, "magic")? != MODEL_MAGIC {
        return Err(Error::Format("missing HRM1 magic".into()));
    }
    let len = read_u32(&mut r, "metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&read_exact_vec(&mut r, len, "metadata")?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", meta.format_version)));
    }
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for expected in &meta.tensors {
        let name_len = read_u32(&mut r, "tensor name length")? as usize;
        let name = String::from_utf8(read_exact_vec(&mut r, name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u32(&mut r, &name)? as usize;
        let cols = read_u32(&mut r, &name)? as usize;
        if name != expected.name || rows != expected.rows || cols != expected.cols {
            return Err(Error::Format(format!(
                "tensor {name} [{rows}x{cols}] does not match metadata entry {} [{}x{}]",
                expected.name, expected.rows, expected.cols
            )));
        }
        let bytes = read_exact_vec(&mut r, rows * cols * 4, &name)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((name, Tensor::from_vec(rows, cols, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensors", rest.len())));
    }
    Ok((meta, tensors))
}

/// Copies loaded tensors into a freshly built model, requiring an exact
/// name and shape match in both directions.
pub fn load_params<T: Scalar>(params: Vec<&mut ParamTensor<T>>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut by_name: HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    for p in params {
        let t = by_name
            .remove(&p.name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Format(format!("tensor {} holds non-finite values", p.name)));
        }
        p.value = t.cast();
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected tensor {extra}")));
    }
    Ok(())
}
