//! Single-file tensor archive.
//!
//! Layout:
//!
//! ```text
//! u64 LE   header length in bytes (n)
//! n bytes  UTF-8 JSON header
//! ...      raw little-endian arrays, back to back
//! ```
//!
//! The header is an object mapping each tensor name to
//! `{"dtype": "F32" | "F64", "shape": [..], "data_offsets": [begin, end]}`
//! where offsets are byte positions relative to the first byte after the
//! header. The reserved key `"__metadata__"` holds an arbitrary JSON value
//! (model config, optimizer step counter and so on).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DType, Real, Tensor};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Serialize named tensors plus metadata to bytes.
pub fn to_bytes<T: Real>(tensors: &[(String, Tensor<T>)], metadata: &Value) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut body = Vec::new();
    for (name, t) in tensors {
        let begin = body.len();
        for &v in t.data() {
            v.write_le(&mut body);
        }
        let entry = Entry {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            data_offsets: [begin, body.len()],
        };
        header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
    }
    header.insert(METADATA_KEY.into(), metadata.clone());
    let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + body.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    out
}

/// Parse bytes produced by [`to_bytes`]. Tensors stored at another
/// precision are converted; same-precision tensors round-trip bit-exactly.
/// Entries come back ordered by their position in the file.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(Vec<(String, Tensor<T>)>, Value), CheckpointError> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| CheckpointError::Format("file shorter than the 8-byte length prefix".into()))?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| CheckpointError::Format(format!("header of {hlen} bytes truncated at byte {}", bytes.len())))?;
    let header: BTreeMap<String, Value> =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Format(format!("header json: {e}")))?;
    let body = &bytes[8 + hlen..];
    let mut metadata = Value::Null;
    let mut entries = Vec::new();
    for (name, v) in header {
        if name == METADATA_KEY {
            metadata = v;
            continue;
        }
        let e: Entry = serde_json::from_value(v).map_err(|e| CheckpointError::Format(format!("entry {name}: {e}")))?;
        entries.push((name, e));
    }
    entries.sort_by_key(|(_, e)| e.data_offsets[0]);
    let mut out = Vec::with_capacity(entries.len());
    for (name, e) in entries {
        let [b, end] = e.data_offsets;
        let raw = body.get(b..end).ok_or_else(|| {
            CheckpointError::Format(format!("data of {name} ({b}..{end}) beyond body length {}", body.len()))
        })?;
        let w = e.dtype.size();
        let n: usize = e.shape.iter().product();
        if raw.len() != n * w {
            return Err(CheckpointError::Format(format!(
                "{name}: shape {:?} needs {} bytes, found {}",
                e.shape,
                n * w,
                raw.len()
            )));
        }
        let data: Vec<T> = match (e.dtype, T::DTYPE) {
            (a, b) if a == b => raw.chunks_exact(w).map(T::read_le).collect(),
            (DType::F32, _) => raw
                .chunks_exact(4)
                .map(|c| T::c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            (DType::F64, _) => raw
                .chunks_exact(8)
                .map(|c| T::c(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        out.push((name, Tensor::from_vec(&e.shape, data)));
    }
    Ok((out, metadata))
}

pub fn save<T: Real>(path: &Path, tensors: &[(String, Tensor<T>)], metadata: &Value) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(tensors, metadata))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(Vec<(String, Tensor<T>)>, Value), CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = vec![
            ("b".to_string(), Tensor::<f32>::from_vec(&[2], vec![0.1, -3.5e-20])),
            ("a".to_string(), Tensor::<f32>::from_vec(&[1, 1], vec![f32::MIN_POSITIVE])),
        ];
        let meta = serde_json::json!({"step": 7});
        let bytes = to_bytes(&t, &meta);
        let (back, m) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(m, meta);
        let (wide, _) = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(wide[0].1.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn truncation_is_reported() {
        let t = vec![("w".to_string(), Tensor::<f64>::zeros(&[4]))];
        let bytes = to_bytes(&t, &Value::Null);
        assert!(from_bytes::<f64>(&bytes[..4]).is_err());
        let err = from_bytes::<f64>(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
    }
}
