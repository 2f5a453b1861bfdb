//! Parameter checkpoint files.
//!
//! Layout:
//!
//! ```text
//! b"DMRNCKPT"              8-byte magic
//! manifest length          u64, little-endian
//! manifest                 UTF-8 JSON: dtype, backbone config, records
//! data                     little-endian elements, records back to back
//! ```
//!
//! Each manifest record lists `name`, `kind`, `shape` and the byte `offset`
//! of its data relative to the start of the data section. Files round-trip
//! bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ModelParams, ParamEntry, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

const MAGIC: &[u8; 8] = b"DMRNCKPT";
const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "<manifest>";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: DType,
    config: BackboneConfig,
    records: Vec<Record>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    offset: u64,
}

fn corrupt(record: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        record: record.to_string(),
        reason: reason.into(),
    }
}

pub fn to_bytes<T: Element>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let records = params
        .entries()
        .iter()
        .map(|e| {
            let r = Record {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.tensor.shape().to_vec(),
                offset,
            };
            offset += (e.tensor.numel() * T::DTYPE.size()) as u64;
            r
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        version: FORMAT_VERSION,
        dtype: T::DTYPE,
        config: params.config().clone(),
        records,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for e in params.entries() {
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<ModelParams<T>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(MANIFEST, "missing checkpoint header"));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let data_start = 16u64
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| corrupt(MANIFEST, format!("manifest length {manifest_len} exceeds file")))?
        as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| corrupt(MANIFEST, format!("unreadable manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(corrupt(MANIFEST, format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(corrupt(
            MANIFEST,
            format!("stored as {:?}, requested {:?}", manifest.dtype, T::DTYPE),
        ));
    }
    let data = &bytes[data_start..];
    let width = T::DTYPE.size();
    let mut expected_offset = 0u64;
    let mut entries = Vec::with_capacity(manifest.records.len());
    for r in manifest.records {
        if r.offset != expected_offset {
            return Err(corrupt(
                &r.name,
                format!("offset {} but previous records end at {expected_offset}", r.offset),
            ));
        }
        let numel: usize = r.shape.iter().product();
        let len = (numel * width) as u64;
        let end = r.offset + len;
        if end > data.len() as u64 {
            return Err(corrupt(
                &r.name,
                format!("truncated: needs bytes {}..{end}, data section has {}", r.offset, data.len()),
            ));
        }
        let raw = &data[r.offset as usize..end as usize];
        let values = raw.chunks_exact(width).map(T::read_le).collect();
        entries.push(ParamEntry {
            tensor: Tensor::new(&r.shape, values)?,
            name: r.name,
            kind: r.kind,
        });
        expected_offset = end;
    }
    if expected_offset != data.len() as u64 {
        return Err(corrupt(
            MANIFEST,
            format!("{} trailing bytes after last record", data.len() as u64 - expected_offset),
        ));
    }
    ModelParams::from_entries(&manifest.config, entries)
}

/// Writes a checkpoint; the file appears atomically.
pub fn save<T: Element>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn restore<T: Element>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams<f32> {
        let cfg = BackboneConfig {
            input_size: 32,
            in_channels: 1,
            stage_channels: [4, 4, 8, 8],
            blocks_per_stage: 1,
        };
        ModelParams::init(&cfg, 11).unwrap()
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let p = params();
        let bytes = to_bytes(&p).unwrap();
        let q: ModelParams<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(to_bytes(&q).unwrap(), bytes);
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = to_bytes(&params()).unwrap();
        let err = from_bytes::<f32>(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Checkpoint { record, reason } => {
                assert_eq!(record, "rpu4.fc.bias");
                assert!(reason.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let bytes = to_bytes(&params()).unwrap();
        assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn corrupt_manifest_shape_names_record() {
        let bytes = to_bytes(&params()).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
        // Swap one record's shape for an equally sized but wrong one.
        let tampered = text.replacen(
            "\"name\":\"stem.conv.weight\",\"kind\":\"weight\",\"shape\":[4,1,3,3]",
            "\"name\":\"stem.conv.weight\",\"kind\":\"weight\",\"shape\":[2,2,3,3]",
            1,
        );
        assert_ne!(tampered, text);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        match from_bytes::<f32>(&out).unwrap_err() {
            Error::Checkpoint { record, .. } => assert_eq!(record, "stem.conv.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(from_bytes::<f32>(b"not a checkpoint at all").is_err());
        assert!(from_bytes::<f32>(&[]).is_err());
    }
}
