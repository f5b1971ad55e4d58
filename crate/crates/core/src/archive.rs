//! Portable tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes   "VPTARCH\0"
//! header_len     u64
//! header_sha256  32 bytes  digest of the header bytes
//! header         header_len bytes of UTF-8 JSON
//! zero padding   up to the next multiple of 64 bytes (from file start)
//! payload        f64 tensors, row-major, each starting at a multiple of 64
//!                bytes from the payload start, zero padding between them
//! ```
//!
//! The header lists every tensor's name, shape, dtype and byte offset
//! (relative to the payload start), free-form metadata, and the SHA-256 of
//! the whole payload region. Both digests are checked on read.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::vit::{BlockWeights, ClassifierHead, FrozenBackbone, LayerNorm, PromptSet, Provenance, VitConfig};

pub const MAGIC: &[u8; 8] = b"VPTARCH\0";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;
const PREAMBLE: usize = 8 + 8 + 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Always `"f64-le"`.
    pub dtype: String,
    /// Byte offset from the payload start.
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
    pub payload_sha256: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Named matrices plus JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub tensors: Vec<(String, DenseMatrix)>,
    pub metadata: serde_json::Value,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl TensorArchive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            tensors: Vec::new(),
            metadata,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: DenseMatrix) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Like [`TensorArchive::get`] but a missing tensor is an archive error.
    pub fn require(&self, name: &str) -> Result<&DenseMatrix> {
        self.get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names = std::collections::HashSet::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, m) in &self.tensors {
            if !names.insert(name.as_str()) {
                return Err(Error::Archive(format!("duplicate tensor name {name}")));
            }
            payload.resize(align(payload.len()), 0);
            let offset = payload.len();
            for v in m.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                dtype: "f64-le".into(),
                offset,
                nbytes: m.data().len() * 8,
            });
        }
        let header = ArchiveHeader {
            format_version: FORMAT_VERSION,
            tensors: entries,
            payload_len: payload.len(),
            payload_sha256: sha256_hex(&payload),
            metadata: self.metadata.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(align(PREAMBLE + header_bytes.len()) + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&header_bytes));
        out.extend_from_slice(&header_bytes);
        out.resize(align(out.len()), 0);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes)?;
        let start = align(PREAMBLE + header_len(bytes)?);
        let payload = &bytes[start..];
        if payload.len() != header.payload_len {
            return Err(Error::Archive(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_len
            )));
        }
        let found = sha256_hex(payload);
        if found != header.payload_sha256 {
            return Err(Error::Digest {
                what: "archive payload".into(),
                expected: header.payload_sha256,
                found,
            });
        }
        let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f64-le" {
                return Err(Error::Archive(format!("unsupported dtype {}", e.dtype)));
            }
            let [rows, cols] = e.shape;
            if e.nbytes != rows * cols * 8 || e.offset % ALIGNMENT != 0 {
                return Err(Error::Archive(format!("bad extent for tensor {}", e.name)));
            }
            let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= payload.len());
            let end = end.ok_or_else(|| Error::Archive(format!("tensor {} overruns payload", e.name)))?;
            ranges.push((e.offset, end));
            let data: Vec<f64> = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name.clone(), DenseMatrix::new(rows, cols, data)?));
        }
        ranges.sort_unstable();
        if ranges.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::Archive("tensor extents overlap".into()));
        }
        Ok(Self {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn header_len(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(Error::Archive("not a tensor archive (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if PREAMBLE.checked_add(len).is_none_or(|end| align(end) > bytes.len()) {
        return Err(Error::Archive("truncated header".into()));
    }
    Ok(len)
}

/// Parses and verifies the header without decoding the payload.
pub fn read_header(bytes: &[u8]) -> Result<ArchiveHeader> {
    let len = header_len(bytes)?;
    let header_bytes = &bytes[PREAMBLE..PREAMBLE + len];
    let expected = hex::encode(&bytes[16..48]);
    let found = sha256_hex(header_bytes);
    if expected != found {
        return Err(Error::Digest {
            what: "archive header".into(),
            expected,
            found,
        });
    }
    if bytes[PREAMBLE + len..align(PREAMBLE + len)].iter().any(|&b| b != 0) {
        return Err(Error::Archive("nonzero header padding".into()));
    }
    let header: ArchiveHeader = serde_json::from_slice(header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Archive(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    Ok(header)
}

/// Archive holding every backbone tensor and its head, with the config and
/// frozen-weight digest in the metadata (merged into `extra`).
pub fn backbone_archive(backbone: &FrozenBackbone, extra: serde_json::Value) -> Result<TensorArchive> {
    let mut meta = serde_json::json!({
        "kind": "backbone",
        "vit_config": backbone.config,
        "backbone_digest": backbone.digest(),
    });
    merge(&mut meta, extra);
    let mut a = TensorArchive::new(meta);
    for (name, m) in backbone.frozen_tensors().into_iter().chain(backbone.head_tensors()) {
        a.push(name, m);
    }
    Ok(a)
}

fn merge(base: &mut serde_json::Value, extra: serde_json::Value) {
    if let (Some(b), serde_json::Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
}

fn row_of(a: &TensorArchive, name: &str) -> Result<Vec<f64>> {
    let m = a.require(name)?;
    if m.rows() != 1 {
        return Err(Error::Archive(format!("tensor {name} must be a single row")));
    }
    Ok(m.data().to_vec())
}

/// Rebuilds a backbone and checks its digest against the metadata.
pub fn backbone_from_archive(a: &TensorArchive) -> Result<FrozenBackbone> {
    let config: VitConfig = serde_json::from_value(
        a.metadata
            .get("vit_config")
            .cloned()
            .ok_or_else(|| Error::Archive("backbone archive lacks vit_config".into()))?,
    )?;
    config.validate()?;
    let mut blocks = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let m = |suffix: &str| a.require(&format!("blocks.{l}.{suffix}")).cloned();
        let v = |suffix: &str| row_of(a, &format!("blocks.{l}.{suffix}"));
        blocks.push(BlockWeights {
            w_q: m("attn.w_q")?,
            w_k: m("attn.w_k")?,
            w_v: m("attn.w_v")?,
            b_q: v("attn.b_q")?,
            b_k: v("attn.b_k")?,
            b_v: v("attn.b_v")?,
            w_o: m("attn.w_o")?,
            b_o: v("attn.b_o")?,
            w_ffn_in: m("ffn.w_in")?,
            b_ffn_in: v("ffn.b_in")?,
            w_ffn_out: m("ffn.w_out")?,
            b_ffn_out: v("ffn.b_out")?,
            ln1: LayerNorm {
                gamma: v("ln1.gamma")?,
                beta: v("ln1.beta")?,
            },
            ln2: LayerNorm {
                gamma: v("ln2.gamma")?,
                beta: v("ln2.beta")?,
            },
        });
    }
    let backbone = FrozenBackbone::from_parts(
        config,
        a.require("patch_embed.weight")?.clone(),
        row_of(a, "patch_embed.bias")?,
        a.require("pos_embed")?.clone(),
        row_of(a, "cls_token")?,
        blocks,
        ClassifierHead {
            weight: a.require("head.weight")?.clone(),
            bias: row_of(a, "head.bias")?,
        },
    );
    backbone.validate()?;
    if let Some(expected) = a.metadata.get("backbone_digest").and_then(|v| v.as_str()) {
        let found = backbone.digest();
        if found != expected {
            return Err(Error::Digest {
                what: "backbone weights".into(),
                expected: expected.to_string(),
                found,
            });
        }
    }
    Ok(backbone)
}

/// Archive of prompt sets (one per layer in deep mode), each as tensor
/// `prompts.{i}` with its provenance listed in the metadata.
pub fn prompts_archive(sets: &[PromptSet], extra: serde_json::Value) -> Result<TensorArchive> {
    let provenance: Vec<serde_json::Value> = sets
        .iter()
        .map(|p| {
            Ok(serde_json::json!({
                "provenance": serde_json::to_value(&p.provenance)?,
                "deep_layer": p.deep_layer,
            }))
        })
        .collect::<Result<_>>()?;
    let mut meta = serde_json::json!({ "kind": "prompts", "sets": provenance });
    merge(&mut meta, extra);
    let mut a = TensorArchive::new(meta);
    for (i, p) in sets.iter().enumerate() {
        a.push(format!("prompts.{i}"), p.prompts.clone());
    }
    Ok(a)
}

pub fn prompts_from_archive(a: &TensorArchive) -> Result<Vec<PromptSet>> {
    let sets = a
        .metadata
        .get("sets")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Archive("prompt archive lacks set metadata".into()))?;
    sets.iter()
        .enumerate()
        .map(|(i, meta)| {
            let provenance: Provenance = serde_json::from_value(meta["provenance"].clone())?;
            let mut p = PromptSet::new(a.require(&format!("prompts.{i}"))?.clone(), provenance)?;
            p.deep_layer = meta["deep_layer"].as_u64().map(|l| l as usize);
            Ok(p)
        })
        .collect()
}
