//! Binary checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [0..8)    magic "PLRDCKPT"
//! [8..12)   format version, u32
//! [12..20)  header length H, u64
//! [20..20+H) header, compact JSON
//! ...       zero padding to the next 64-byte boundary
//! payload   little-endian f32 tensor data, each tensor 64-byte aligned
//! [end-32..) SHA-256 of every preceding byte
//! ```
//!
//! The header records the graph and a tensor table (name, shape, dtype,
//! offset relative to the payload start). Tensors appear in canonical graph
//! order, so serialization is byte-for-byte reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Checkpoint, ModelGraph, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PLRDCKPT";
const VERSION: u32 = 1;
const ALIGN: usize = 64;
const CHECKSUM_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    graph: ModelGraph,
    payload_len: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    elems: u64,
}

fn align_up(x: usize) -> usize {
    (x + ALIGN - 1) / ALIGN * ALIGN
}

/// SHA-256 of arbitrary bytes, lowercase hex.
pub fn digest_of(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file on disk, lowercase hex.
pub fn file_digest(path: &std::path::Path) -> Result<String> {
    Ok(digest_of(&std::fs::read(path)?))
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let decls = ckpt.graph.tensor_decls();

    let mut entries = Vec::with_capacity(decls.len());
    let mut offset = 0usize;
    for decl in &decls {
        offset = align_up(offset);
        let elems: usize = decl.shape.iter().product();
        entries.push(TensorEntry {
            name: decl.name.clone(),
            shape: decl.shape.clone(),
            dtype: "f32".into(),
            offset: offset as u64,
            elems: elems as u64,
        });
        offset += elems * 4;
    }
    let payload_len = offset;

    let header = Header { graph: ckpt.graph.clone(), payload_len: payload_len as u64, tensors: entries };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization cannot fail");

    let payload_start = align_up(20 + header_bytes.len());
    let total = payload_start + payload_len + CHECKSUM_LEN;

    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.resize(payload_start, 0);

    for (decl, entry) in decls.iter().zip(&header.tensors) {
        out.resize(payload_start + entry.offset as usize, 0);
        let tensor = ckpt.tensors().get(&decl.name).expect("validated checkpoint");
        out.extend_from_slice(&tensor.payload_bytes());
    }
    out.resize(payload_start + payload_len, 0);

    let checksum = Sha256::digest(&out);
    out.extend_from_slice(&checksum);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 {
        return Err(Error::TruncatedPayload { expected: 20, actual: bytes.len() as u64 });
    }
    if &bytes[0..8] != MAGIC {
        return Err(Error::Corruption("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, supported: VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + header_len {
        return Err(Error::TruncatedPayload {
            expected: (20 + header_len) as u64,
            actual: bytes.len() as u64,
        });
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| Error::Corruption(format!("header parse: {e}")))?;

    let payload_start = align_up(20 + header_len);
    let expected_total = payload_start + header.payload_len as usize + CHECKSUM_LEN;
    if bytes.len() < expected_total {
        return Err(Error::TruncatedPayload { expected: expected_total as u64, actual: bytes.len() as u64 });
    }
    if bytes.len() > expected_total {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected_total
        )));
    }

    let stored = &bytes[expected_total - CHECKSUM_LEN..];
    let computed = Sha256::digest(&bytes[..expected_total - CHECKSUM_LEN]);
    if stored != computed.as_slice() {
        return Err(Error::ChecksumMismatch {
            stored: hex::encode(stored),
            computed: hex::encode(computed),
        });
    }

    let payload = &bytes[payload_start..payload_start + header.payload_len as usize];
    let mut tensors = BTreeMap::new();
    let mut prev_end = 0u64;
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Corruption(format!("tensor {} has dtype {}", entry.name, entry.dtype)));
        }
        let elems: usize = entry.shape.iter().product();
        if elems as u64 != entry.elems {
            return Err(Error::Corruption(format!("tensor {} element count mismatch", entry.name)));
        }
        if entry.offset < prev_end || entry.offset % ALIGN as u64 != 0 {
            return Err(Error::Corruption(format!("tensor {} offset overlaps or is misaligned", entry.name)));
        }
        let start = entry.offset as usize;
        let end = start + elems * 4;
        if end > payload.len() {
            return Err(Error::TruncatedPayload {
                expected: (payload_start + end + CHECKSUM_LEN) as u64,
                actual: bytes.len() as u64,
            });
        }
        prev_end = end as u64;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.insert(entry.name.clone(), Tensor { shape: entry.shape.clone(), data });
    }

    Checkpoint::from_parts(header.graph, tensors)
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_graph;
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = Checkpoint::new_seeded(toy_graph(1), 3, 0.02).unwrap();
        let bytes = to_bytes(&ckpt);
        let reloaded = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&reloaded), bytes);
    }

    #[test]
    fn truncated_file_reports_length() {
        let ckpt = Checkpoint::new_seeded(toy_graph(1), 3, 0.02).unwrap();
        let bytes = to_bytes(&ckpt);
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(from_bytes(cut), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let ckpt = Checkpoint::new_seeded(toy_graph(1), 3, 0.02).unwrap();
        let mut bytes = to_bytes(&ckpt);
        bytes[8] = 9;
        let err = from_bytes(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn checksum_flip_detected() {
        let ckpt = Checkpoint::new_seeded(toy_graph(1), 3, 0.02).unwrap();
        let mut bytes = to_bytes(&ckpt);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(from_bytes(&bytes), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn bad_magic() {
        let ckpt = Checkpoint::new_seeded(toy_graph(1), 3, 0.02).unwrap();
        let mut bytes = to_bytes(&ckpt);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Corruption(_))));
    }
}
