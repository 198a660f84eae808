//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "FAMC"
//! schema_version   u32
//! header_len       u32
//! header           JSON-encoded ArchConfig
//! group_count      u32
//! per group:
//!   name_len u32, name utf-8, rows u64, cols u64, data f32 LE
//! ```
//!
//! The same encoding doubles as the wire format for model-parameter
//! messages, so byte accounting and privacy scanning see exactly what a
//! real transport would.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

use super::{ArchConfig, ModelParams, PrototypeSet};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FAMC";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Encode a model into the checkpoint byte format.
pub fn serialize_params<S: Scalar>(params: &ModelParams<S>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&params.arch)
        .map_err(|e| CoreError::Checkpoint(format!("header encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_SCHEMA_VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    put_u32(&mut out, params.tensor_count() as u32);
    params.visit_tensors(|name, t| {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.nrows() as u64);
        put_u64(&mut out, t.ncols() as u64);
        for &v in t.iter() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    });
    Ok(out)
}

/// Encode a prototype set: source id, shape, unit vectors, class labels.
pub fn serialize_prototypes<S: Scalar>(set: &PrototypeSet<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"FAPR");
    put_u32(&mut out, set.source_id as u32);
    put_u64(&mut out, set.vectors.nrows() as u64);
    put_u64(&mut out, set.vectors.ncols() as u64);
    for &v in set.vectors.iter() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    for &c in &set.class_labels {
        put_u32(&mut out, c as u32);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decode a model from checkpoint bytes, converting stored f32 data into
/// the working scalar type.
pub fn deserialize_params<S: Scalar>(bytes: &[u8]) -> Result<ModelParams<S>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "schema version {version} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})"
        )));
    }
    let header_len = cur.u32()? as usize;
    let arch: ArchConfig = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| CoreError::Checkpoint(format!("header decode: {e}")))?;
    arch.validate()?;
    let group_count = cur.u32()? as usize;

    // Template gives the expected group names/shapes in canonical order.
    let mut template = super::init_model::<S>(&arch, 0)?;
    if group_count != template.tensor_count() {
        return Err(CoreError::Checkpoint(format!(
            "{group_count} parameter groups, architecture expects {}",
            template.tensor_count()
        )));
    }
    let mut expected: Vec<(String, (usize, usize))> = Vec::new();
    template.visit_tensors(|n, t| expected.push((n.to_string(), t.dim())));

    let mut tensors: Vec<Array2<S>> = Vec::with_capacity(group_count);
    for (name, dim) in &expected {
        let name_len = cur.u32()? as usize;
        let got_name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CoreError::Checkpoint("group name not utf-8".into()))?;
        if got_name != name {
            return Err(CoreError::Checkpoint(format!(
                "group '{got_name}' where '{name}' expected"
            )));
        }
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        if (rows, cols) != *dim {
            return Err(CoreError::Checkpoint(format!(
                "group '{name}' has shape {rows}x{cols}, expected {}x{}",
                dim.0, dim.1
            )));
        }
        let raw = cur.take(rows * cols * 4)?;
        let mut t = Array2::zeros((rows, cols));
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            t[(i / cols, i % cols)] = S::cast(v as f64);
        }
        tensors.push(t);
    }
    if cur.pos != bytes.len() {
        return Err(CoreError::Checkpoint("trailing bytes after last group".into()));
    }
    template.visit_tensors_mut(|idx, t| *t = tensors[idx].clone());
    Ok(template)
}

pub fn save_checkpoint<S: Scalar>(params: &ModelParams<S>, path: &Path) -> Result<()> {
    let bytes = serialize_params(params)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelParams<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    deserialize_params(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_model;

    #[test]
    fn roundtrip_preserves_f32_models_exactly() {
        let arch = ArchConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_hidden: 12,
            image_side: 8,
            patch_side: 4,
            classes: 3,
            proj_dim: 5,
            ..ArchConfig::default()
        };
        let m = init_model::<f32>(&arch, 42).unwrap();
        let bytes = serialize_params(&m).unwrap();
        let back: ModelParams<f32> = deserialize_params(&bytes).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let arch = ArchConfig {
            depth: 1,
            dim: 4,
            heads: 1,
            mlp_hidden: 4,
            image_side: 4,
            patch_side: 2,
            classes: 2,
            proj_dim: 3,
            ..ArchConfig::default()
        };
        let m = init_model::<f32>(&arch, 1).unwrap();
        let mut bytes = serialize_params(&m).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = deserialize_params::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("schema version"));
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let err = deserialize_params::<f32>(b"NOPE....").unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn save_load_via_file() {
        let arch = ArchConfig {
            depth: 1,
            dim: 4,
            heads: 1,
            mlp_hidden: 4,
            image_side: 4,
            patch_side: 2,
            classes: 2,
            proj_dim: 3,
            ..ArchConfig::default()
        };
        let m = init_model::<f32>(&arch, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.famc");
        save_checkpoint(&m, &path).unwrap();
        let back: ModelParams<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(m, back);
    }
}
