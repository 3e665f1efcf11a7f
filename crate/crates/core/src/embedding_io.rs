//! Embedding export: `u32 n_nodes, u32 d` (little endian) followed by
//! `n_nodes × d` little-endian `f32` values in row order, plus a JSON index
//! mapping raw user/item tokens to rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};

pub fn encode_embeddings(emb: &ArrayView2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + emb.len() * 4);
    out.extend_from_slice(&(emb.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(emb.ncols() as u32).to_le_bytes());
    for &v in emb.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "file shorter than its header"));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(8))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {n}x{d} embeddings, found {}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite embedding value"));
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("length checked above"))
}

pub fn write_embeddings(emb: &ArrayView2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(emb)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path)
}

/// Token → row lookup written next to an embedding file. Item rows are
/// offset by `n_users`, matching the joint node space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub n_users: usize,
    pub n_items: usize,
    pub users: BTreeMap<String, usize>,
    pub items: BTreeMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn from_dataset(ds: &InteractionDataset) -> Self {
        EmbeddingIndex {
            n_users: ds.n_users,
            n_items: ds.n_items,
            users: ds.user_tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect(),
            items: ds
                .item_tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), ds.n_users + i))
                .collect(),
        }
    }
}

pub fn write_index(index: &EmbeddingIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(index)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: impl AsRef<Path>) -> Result<EmbeddingIndex> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
