//! Model file format.
//!
//! ```text
//! offset 0   b"PUTR"
//! offset 4   version byte (0x01)
//! offset 5   header length in bytes, u64 little-endian
//! offset 13  UTF-8 JSON header
//!            zero padding up to the next multiple of 64
//!            tensor payloads, raw little-endian f32
//! ```
//!
//! The header holds the config, each layer's live KV-head and FFN-node
//! original indices, and a tensor index mapping each name to dtype, shape,
//! byte offset (relative to the payload start) and byte length. Payloads
//! follow the index order (names sorted), each starting on a 64-byte
//! boundary.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{FfnKind, LayerWeights, ModelConfig, ToyTransformer};

pub const MAGIC: &[u8; 4] = b"PUTR";
pub const VERSION: u8 = 1;
const ALIGN: usize = 64;
const PREAMBLE: usize = 4 + 1 + 8;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    layers: Vec<LayerIndex>,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerIndex {
    kv_heads: Vec<usize>,
    ffn_nodes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// `(name, shape, data)` for every tensor, keyed by name.
fn tensors(model: &ToyTransformer) -> BTreeMap<String, (Vec<usize>, &[f32])> {
    fn mat(name: String, m: &Matrix) -> (String, (Vec<usize>, &[f32])) {
        (name, (vec![m.rows(), m.cols()], m.data()))
    }
    let mut out = BTreeMap::new();
    let mut entries: Vec<(String, (Vec<usize>, &[f32]))> = vec![
        mat("token_embedding".into(), &model.token_embedding),
        mat("lm_head".into(), &model.lm_head),
        ("final_norm".into(), (vec![model.final_norm.len()], &model.final_norm[..])),
    ];
    for (i, l) in model.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{i:03}.{s}");
        entries.push(mat(p("wq"), &l.wq));
        entries.push(mat(p("wk"), &l.wk));
        entries.push(mat(p("wv"), &l.wv));
        entries.push(mat(p("wo"), &l.wo));
        if let Some(g) = &l.gate {
            entries.push(mat(p("gate"), g));
        }
        entries.push(mat(p("up"), &l.up));
        entries.push(mat(p("down"), &l.down));
        entries.push((p("attn_norm"), (vec![l.attn_norm.len()], &l.attn_norm[..])));
        entries.push((p("ffn_norm"), (vec![l.ffn_norm.len()], &l.ffn_norm[..])));
    }
    out.extend(entries);
    out
}

pub(crate) fn to_bytes(model: &ToyTransformer) -> Vec<u8> {
    let tensors = tensors(model);
    let mut index = BTreeMap::new();
    let mut offset = 0usize;
    for (name, (shape, data)) in &tensors {
        let length = data.len() * 4;
        index.insert(
            name.clone(),
            TensorEntry { dtype: "f32".into(), shape: shape.clone(), offset: offset as u64, length: length as u64 },
        );
        offset = align_up(offset + length);
    }
    let header = Header {
        config: model.config.clone(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerIndex { kv_heads: l.kv_heads.clone(), ffn_nodes: l.ffn_nodes.clone() })
            .collect(),
        tensors: index,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload_start = align_up(PREAMBLE + json.len());

    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(payload_start, 0);
    for (name, (_, data)) in &tensors {
        let at = payload_start + header.tensors[name].offset as usize;
        out.resize(at, 0);
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ToyTransformer> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated("preamble".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::Header(format!("header JSON: {e}")))?;
    header.config.validate()?;
    if header.layers.len() != header.config.n_layers {
        return Err(Error::Header(format!(
            "{} layer entries for n_layers {}",
            header.layers.len(),
            header.config.n_layers
        )));
    }
    let payload_start = align_up(header_end);

    let take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let entry = header
            .tensors
            .get(name)
            .ok_or_else(|| Error::Header(format!("missing tensor {name}")))?;
        if entry.dtype != "f32" {
            return Err(Error::Header(format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        if entry.shape != shape {
            return Err(Error::Header(format!("{name}: shape {:?}, expected {:?}", entry.shape, shape)));
        }
        let count: usize = shape.iter().product();
        if entry.length as usize != count * 4 {
            return Err(Error::Header(format!("{name}: byte length {} for {count} values", entry.length)));
        }
        let start = payload_start
            .checked_add(entry.offset as usize)
            .ok_or_else(|| Error::Truncated(name.into()))?;
        let end = start + entry.length as usize;
        if end > bytes.len() {
            return Err(Error::Truncated(format!(
                "tensor {name} needs bytes {start}..{end}, file has {}",
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.into()));
        }
        Ok(data)
    };

    let c = header.config.clone();
    let matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        Matrix::new(rows, cols, take(name, &[rows, cols])?)
    };
    let token_embedding = matrix("token_embedding", c.vocab_size, c.d_model)?;
    let lm_head = matrix("lm_head", c.d_model, c.vocab_size)?;
    let g = c.group_size();
    let mut layers = Vec::with_capacity(c.n_layers);
    for (i, li) in header.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{i:03}.{s}");
        let kv = li.kv_heads.len() * c.head_dim;
        let q = li.kv_heads.len() * g * c.head_dim;
        let ff = li.ffn_nodes.len();
        layers.push(LayerWeights {
            wq: matrix(&p("wq"), c.d_model, q)?,
            wk: matrix(&p("wk"), c.d_model, kv)?,
            wv: matrix(&p("wv"), c.d_model, kv)?,
            wo: matrix(&p("wo"), q, c.d_model)?,
            gate: match c.ffn_kind {
                FfnKind::Gated => Some(matrix(&p("gate"), c.d_model, ff)?),
                FfnKind::Plain => None,
            },
            up: matrix(&p("up"), c.d_model, ff)?,
            down: matrix(&p("down"), ff, c.d_model)?,
            attn_norm: take(&p("attn_norm"), &[c.d_model])?,
            ffn_norm: take(&p("ffn_norm"), &[c.d_model])?,
            kv_heads: li.kv_heads.clone(),
            ffn_nodes: li.ffn_nodes.clone(),
        });
    }
    let final_norm = take("final_norm", &[c.d_model])?;
    let model = ToyTransformer { config: c, token_embedding, layers, final_norm, lm_head };
    let expected = tensors(&model).len();
    if header.tensors.len() != expected {
        return Err(Error::Header(format!(
            "header lists {} tensors, model has {expected}",
            header.tensors.len()
        )));
    }
    model.check_consistency()?;
    Ok(model)
}

pub fn save(model: &ToyTransformer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ToyTransformer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
