//! Named-tensor container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then the raw little-endian payloads back to back.
//!
//! Files are written to a sibling temporary path and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"EHRTENS1";

#[derive(Debug, thiserror::Error)]
pub enum TensorFileError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorFileError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: Value,
    tensors: Vec<Entry>,
}

/// Header metadata plus tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBundle<T> {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> TensorBundle<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TensorFileError + '_ {
    move |source| TensorFileError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn encode_tensors<T: Scalar>(meta: &Value, tensors: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let elem = std::mem::size_of::<T>();
    let mut offset = 0;
    let entries: Vec<Entry> = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len() * elem;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        dtype: T::DTYPE.to_string(),
        meta: meta.clone(),
        tensors: entries,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    out
}

pub fn save_tensors<T: Scalar>(path: impl AsRef<Path>, meta: &Value, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_tensors(meta, tensors)).map_err(io_err(path))
}

/// Reads a file written at either float width, converting to `T`.
pub fn load_tensors<T: Scalar>(path: impl AsRef<Path>) -> Result<TensorBundle<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensors(&bytes).map_err(|detail| TensorFileError::Format {
        path: path.display().to_string(),
        detail,
    })
}

pub fn decode_tensors<T: Scalar>(bytes: &[u8]) -> std::result::Result<TensorBundle<T>, String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a tensor file".into());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or("truncated header")?;
    let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| e.to_string())?;
    let payload = &bytes[body..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let data: Vec<T> = match header.dtype.as_str() {
            "f32" => read_slice::<f32>(payload, e.offset, n)?.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            "f64" => read_slice::<f64>(payload, e.offset, n)?.iter().map(|&x| T::from_f64_lossy(x)).collect(),
            other => return Err(format!("unsupported dtype {other}")),
        };
        let t = Tensor::new(e.shape, data).map_err(|err| err.to_string())?;
        tensors.push((e.name, t));
    }
    Ok(TensorBundle {
        meta: header.meta,
        tensors,
    })
}

fn read_slice<S: Scalar>(payload: &[u8], offset: usize, n: usize) -> std::result::Result<Vec<S>, String> {
    let size = std::mem::size_of::<S>();
    let end = offset + n * size;
    if end > payload.len() {
        return Err(format!("payload too short: need {end} bytes, have {}", payload.len()));
    }
    Ok(S::from_le_bytes_slice(&payload[offset..end]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 1e-300, f64::MAX, 0.1]).unwrap();
        let b = Tensor::<f64>::scalar(7.0);
        let meta = serde_json::json!({"seed": 3, "kind": "test"});
        save_tensors(&p, &meta, &[("a", &a), ("b", &b)]).unwrap();
        let back = load_tensors::<f64>(&p).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.get("a").unwrap(), &a);
        assert_eq!(back.get("b").unwrap(), &b);
        assert!(!dir.path().join("t.bin.tmp").exists());
    }

    #[test]
    fn widths_convert_on_load() {
        let a = Tensor::<f32>::from_f64(&[3], &[0.5, 1.5, -2.0]).unwrap();
        let bytes = encode_tensors(&Value::Null, &[("a", &a)]);
        let wide = decode_tensors::<f64>(&bytes).unwrap();
        assert_eq!(wide.tensors[0].1.data(), &[0.5, 1.5, -2.0]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(decode_tensors::<f32>(b"garbage").is_err());
        let a = Tensor::<f32>::zeros(&[4]);
        let mut bytes = encode_tensors(&Value::Null, &[("a", &a)]);
        bytes.truncate(bytes.len() - 2);
        assert!(decode_tensors::<f32>(&bytes).is_err());
    }
}
