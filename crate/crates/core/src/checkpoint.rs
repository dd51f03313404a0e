//! Versioned binary container: magic, version, JSON header, then raw
//! little-endian `f64` tensors in header order. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CHANLAB\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// What the file holds, e.g. `"lm"` or `"delta:HeadTuning"`.
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    /// Kind-specific metadata.
    pub meta: serde_json::Value,
}

pub fn write(path: &Path, kind: &str, meta: serde_json::Value, tensors: &[(String, &[f64])]) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                len: t.len(),
            })
            .collect(),
        meta,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for (_, t) in tensors {
        for v in t.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a container, returning the header and tensors in header order.
pub fn read(path: &Path) -> Result<(Header, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(io)?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(io)?;
    let hlen = u64::from_le_bytes(u64b) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(io)?;
    let header: Header = serde_json::from_slice(&hbytes)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let mut raw = vec![0u8; entry.len * 8];
        r.read_exact(&mut raw).map_err(io)?;
        tensors.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{}: trailing bytes", path.display())));
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let a = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300];
        let b = vec![std::f64::consts::PI];
        write(
            &path,
            "test",
            serde_json::json!({"x": 1}),
            &[("a".into(), &a[..]), ("b".into(), &b[..])],
        )
        .unwrap();
        let (h, t) = read(&path).unwrap();
        assert_eq!(h.kind, "test");
        assert_eq!(t.len(), 2);
        for (x, y) in t[0].iter().zip(&a) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(t[1][0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTACHECKPOINT").unwrap();
        assert!(matches!(read(&path), Err(Error::Checkpoint(_))));
    }
}
