//! Checkpoint container.
//!
//! Layout: magic `SKXC`, `u32` version, `u64` header length, a JSON header
//! listing the model config, its hash and every tensor's name, kind and
//! shape, then each tensor's values as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"SKXC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    trainable: bool,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    let store = model.store();
    let header = Header {
        model: model.config().clone(),
        config_hash: model.config().hash(),
        tensors: store
            .entries()
            .iter()
            .map(|e| TensorEntry {
                name: e.name.clone(),
                trainable: e.kind == ParamKind::Trainable,
                shape: e.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in store.entries() {
        for x in e.value.iter() {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Model<S>> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize.saturating_add(hlen);
    if bytes.len() < body {
        return Err(Error::Truncated {
            expected: body,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Format {
        offset: 16,
        msg: format!("bad header: {e}"),
    })?;
    if header.config_hash != header.model.hash() {
        return Err(Error::Format {
            offset: 16,
            msg: "config hash does not match config".into(),
        });
    }
    let expected = body + 4 * header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>();
    if bytes.len() != expected {
        return Err(if bytes.len() < expected {
            Error::Truncated {
                expected,
                found: bytes.len(),
            }
        } else {
            Error::Format {
                offset: expected,
                msg: "trailing bytes".into(),
            }
        });
    }
    let mut store = ParamStore::<S>::new();
    let mut at = body;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let vals: Vec<S> = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| S::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        at += 4 * n;
        let value = ArrayD::from_shape_vec(IxDyn(&t.shape), vals).expect("length checked");
        let kind = if t.trainable {
            ParamKind::Trainable
        } else {
            ParamKind::Buffer
        };
        store.add(t.name.clone(), value, kind);
    }
    Model::with_store(header.model, store)
}

pub fn save<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
