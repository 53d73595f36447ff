//! The `.egir` container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EGIR"
//! 4       4     format version, u32 little-endian (= 1)
//! 8       8     manifest length L, u64 little-endian
//! 16      L     UTF-8 JSON manifest
//! 16+L    ..    tensor region: row-major f32 little-endian initializer data
//! ```
//!
//! Initializers are laid out contiguously in name order; each manifest
//! descriptor carries its byte offset (relative to the tensor region) and
//! byte length. Encoding is deterministic, so `serialize(deserialize(b)) == b`
//! for any accepted `b`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::{GraphNode, ModelGraph, ValueInfo, Violation, FORMAT_VERSION};
use crate::tensor::{DType, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"EGIR";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:02x?}, expected \"EGIR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("manifest is inconsistent: {0}")]
    Inconsistent(String),
    #[error("manifest is not valid JSON: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("initializer {name:?}: {source}")]
    Tensor {
        name: String,
        #[source]
        source: TensorError,
    },
    #[error("model fails validation: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDescriptor {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    inputs: Vec<ValueInfo>,
    outputs: Vec<String>,
    nodes: Vec<GraphNode>,
    initializers: Vec<TensorDescriptor>,
    metadata: BTreeMap<String, String>,
}

pub fn serialize(model: &ModelGraph) -> Result<Vec<u8>, FormatError> {
    let violations = model.validate();
    if !violations.is_empty() {
        return Err(FormatError::Invalid(violations));
    }

    let mut descriptors = Vec::with_capacity(model.initializers.len());
    let mut offset = 0u64;
    for (name, tensor) in &model.initializers {
        let length = (tensor.len() * 4) as u64;
        descriptors.push(TensorDescriptor {
            name: name.clone(),
            dtype: DType::F32,
            shape: tensor.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let manifest = Manifest {
        version: model.version,
        inputs: model.inputs.clone(),
        outputs: model.outputs.clone(),
        nodes: model.nodes.clone(),
        initializers: descriptors,
        metadata: model.metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&model.version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for tensor in model.initializers.values() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelGraph, FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            section: "header",
            needed: HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - HEADER_LEN) as u64;
    if manifest_len > available {
        return Err(FormatError::Truncated {
            section: "manifest",
            needed: manifest_len,
            available,
        });
    }
    let manifest_end = HEADER_LEN + manifest_len as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])?;
    if manifest.version != version {
        return Err(FormatError::Inconsistent(format!(
            "header version {version} but manifest version {}",
            manifest.version
        )));
    }

    let region = &bytes[manifest_end..];
    let mut expected_offset = 0u64;
    let mut previous: Option<&str> = None;
    for d in &manifest.initializers {
        // Canonical layout is strictly ascending name order.
        if previous.is_some_and(|p| p >= d.name.as_str()) {
            return Err(FormatError::Inconsistent(format!(
                "initializer {:?} out of name order or duplicated",
                d.name
            )));
        }
        previous = Some(&d.name);
        if d.dtype != DType::F32 {
            return Err(FormatError::Inconsistent(format!(
                "initializer {:?} has dtype {}, only f32 is stored",
                d.name, d.dtype
            )));
        }
        let elements: u64 = d.shape.iter().map(|&s| s as u64).product();
        if d.length != elements * 4 {
            return Err(FormatError::Inconsistent(format!(
                "initializer {:?} of shape {:?} declares {} bytes",
                d.name, d.shape, d.length
            )));
        }
        if d.offset != expected_offset {
            return Err(FormatError::Inconsistent(format!(
                "initializer {:?} at offset {} but expected {}",
                d.name, d.offset, expected_offset
            )));
        }
        expected_offset += d.length;
    }
    if (region.len() as u64) < expected_offset {
        return Err(FormatError::Truncated {
            section: "tensor region",
            needed: expected_offset,
            available: region.len() as u64,
        });
    }
    if region.len() as u64 > expected_offset {
        return Err(FormatError::Inconsistent(format!(
            "{} trailing bytes after tensor region",
            region.len() as u64 - expected_offset
        )));
    }

    let mut initializers = BTreeMap::new();
    for d in manifest.initializers {
        let start = d.offset as usize;
        let raw = &region[start..start + d.length as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(d.shape, data).map_err(|source| FormatError::Tensor {
            name: d.name.clone(),
            source,
        })?;
        initializers.insert(d.name, tensor);
    }
    let model = ModelGraph {
        version,
        inputs: manifest.inputs,
        outputs: manifest.outputs,
        initializers,
        nodes: manifest.nodes,
        metadata: manifest.metadata,
    };
    let violations = model.validate();
    if !violations.is_empty() {
        return Err(FormatError::Invalid(violations));
    }
    Ok(model)
}

pub fn save(model: &ModelGraph, path: impl AsRef<Path>) -> Result<(), FormatError> {
    std::fs::write(path, serialize(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph, FormatError> {
    deserialize(&std::fs::read(path)?)
}
