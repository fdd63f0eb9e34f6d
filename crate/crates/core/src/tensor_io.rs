//! Repo-wide on-disk formats.
//!
//! Tensor container (`.lgt`):
//!
//! ```text
//! b"LGT1"
//! u32 dtype      (0 = float32)
//! u32 ndim
//! u32 dims[ndim]
//! f32 payload    (row-major, little-endian)
//! ```
//!
//! Metadata sidecar: UTF-8, one `key: value` per line. Keys are unique and
//! written in sorted order so identical maps produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LGT1";
pub const DTYPE_F32: u32 = 0;

/// A dense float32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} imply {n} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: origin.to_path_buf(),
            message,
        };
        let mut words = bytes.get(4..).unwrap_or(&[]).chunks_exact(4);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing LGT1 magic".into()));
        }
        let mut next_u32 = || {
            words
                .next()
                .map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]]))
        };
        let dtype = next_u32().ok_or_else(|| bad("truncated header".into()))?;
        if dtype != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype code {dtype}")));
        }
        let ndim = next_u32().ok_or_else(|| bad("truncated header".into()))? as usize;
        let header = 12 + 4 * ndim;
        if bytes.len() < header {
            return Err(bad("truncated dims".into()));
        }
        let dims: Vec<usize> = bytes[12..header]
            .chunks_exact(4)
            .map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]]) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != 4 * n {
            return Err(bad(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                payload.len(),
                4 * n
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(path: &Path, tensor: &StoredTensor) -> Result<()> {
    write_atomic(path, &tensor.encode())
}

pub fn read_tensor(path: &Path) -> Result<StoredTensor> {
    let bytes = fs::read(path)?;
    StoredTensor::decode(&bytes, path)
}

pub type Sidecar = BTreeMap<String, String>;

pub fn encode_sidecar(meta: &Sidecar) -> String {
    let mut s = String::new();
    for (k, v) in meta {
        s.push_str(k);
        s.push_str(": ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

pub fn parse_sidecar(text: &str, origin: &Path) -> Result<Sidecar> {
    let mut meta = Sidecar::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once(':').ok_or_else(|| Error::ConfigParse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: format!("expected `key: value`, got `{line}`"),
        })?;
        let key = k.trim().to_string();
        if meta.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::ConfigParse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(meta)
}

pub fn write_sidecar(path: &Path, meta: &Sidecar) -> Result<()> {
    write_atomic(path, encode_sidecar(meta).as_bytes())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path)?;
    parse_sidecar(&text, path)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = StoredTensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = t.encode();
        assert_eq!(&bytes[..4], b"LGT1");
        assert_eq!(&bytes[4..8], &[0, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[1, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = StoredTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = t.encode();
        let err = StoredTensor::decode(&bytes[..bytes.len() - 1], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("payload"));
        assert!(StoredTensor::decode(b"NOPE", Path::new("x")).is_err());
    }

    #[test]
    fn sidecar_rejects_duplicates_with_line_number() {
        let err = parse_sidecar("a: 1\nb: 2\na: 3\n", Path::new("m.txt")).unwrap_err();
        assert!(err.to_string().contains("m.txt:3"), "{err}");
    }

    #[test]
    fn sidecar_sorted_and_stable() {
        let mut m = Sidecar::new();
        m.insert("zeta".into(), "1".into());
        m.insert("alpha".into(), "two words".into());
        let s = encode_sidecar(&m);
        assert_eq!(s, "alpha: two words\nzeta: 1\n");
        assert_eq!(parse_sidecar(&s, Path::new("m")).unwrap(), m);
    }

    proptest::proptest! {
        #[test]
        fn container_roundtrip(dims in proptest::collection::vec(1usize..5, 0..4), seed in 0u32..1000) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
            let t = StoredTensor::new(dims, data).unwrap();
            let back = StoredTensor::decode(&t.encode(), Path::new("p")).unwrap();
            proptest::prop_assert_eq!(back, t);
        }
    }
}
