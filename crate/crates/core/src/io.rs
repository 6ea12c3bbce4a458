//! Binary array formats.
//!
//! Two containers share the same header idea (magic, rank, dims):
//! * single-array files, little-endian `f32`, used for dataset images and
//!   masks (`MANETF32`);
//! * named-array archives, little-endian `f64` with a free-form text meta
//!   block, used for checkpoints and embedding dumps (`MANETPK1`).

use ndarray::IxDyn;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::autodiff::Arr;

pub const ARRAY_MAGIC: &[u8; 8] = b"MANETF32";
pub const ARCHIVE_MAGIC: &[u8; 8] = b"MANETPK1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a {expected} file)")]
    BadMagic { path: String, expected: String },
    #[error("{path}: malformed {what}")]
    Malformed { path: String, what: String },
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, IoError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<(), IoError> {
    w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))
}

/// Write one array as little-endian `f32` with the 8-byte magic, rank and
/// dims header.
pub fn write_array_f32(path: &Path, arr: &Arr) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(ARRAY_MAGIC).map_err(|e| io_err(path, e))?;
    write_u32(&mut w, arr.ndim() as u32, path)?;
    for &d in arr.shape() {
        write_u32(&mut w, d as u32, path)?;
    }
    for &v in arr.iter() {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_array_f32(path: &Path) -> Result<Arr, IoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != ARRAY_MAGIC {
        return Err(IoError::BadMagic {
            path: path.display().to_string(),
            expected: "MANETF32".into(),
        });
    }
    let rank = read_u32(&mut r, path)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(&mut r, path)? as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Arr::from_shape_vec(IxDyn(&dims), data).map_err(|_| IoError::Malformed {
        path: path.display().to_string(),
        what: "shape/data mismatch".into(),
    })
}

/// Named-array archive: meta text plus length-prefixed (name, rank, dims,
/// `f64` data) entries. Entry order is preserved.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<(String, Arr)>,
}

impl Archive {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&Arr> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(ARCHIVE_MAGIC).map_err(|e| io_err(path, e))?;
        write_u32(&mut w, 1, path)?; // version
        let meta_text: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        write_u32(&mut w, meta_text.len() as u32, path)?;
        w.write_all(meta_text.as_bytes()).map_err(|e| io_err(path, e))?;
        write_u32(&mut w, self.entries.len() as u32, path)?;
        for (name, arr) in &self.entries {
            write_u32(&mut w, name.len() as u32, path)?;
            w.write_all(name.as_bytes()).map_err(|e| io_err(path, e))?;
            write_u32(&mut w, arr.ndim() as u32, path)?;
            for &d in arr.shape() {
                write_u32(&mut w, d as u32, path)?;
            }
            for &v in arr.iter() {
                w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
            }
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
        if &magic != ARCHIVE_MAGIC {
            return Err(IoError::BadMagic {
                path: path.display().to_string(),
                expected: "MANETPK1".into(),
            });
        }
        let _version = read_u32(&mut r, path)?;
        let meta_len = read_u32(&mut r, path)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf).map_err(|e| io_err(path, e))?;
        let meta_text = String::from_utf8(meta_buf).map_err(|_| IoError::Malformed {
            path: path.display().to_string(),
            what: "meta text".into(),
        })?;
        let meta = meta_text
            .lines()
            .filter_map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
            })
            .collect();
        let count = read_u32(&mut r, path)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r, path)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf).map_err(|e| io_err(path, e))?;
            let name = String::from_utf8(name_buf).map_err(|_| IoError::Malformed {
                path: path.display().to_string(),
                what: "entry name".into(),
            })?;
            let rank = read_u32(&mut r, path)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r, path)? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
                data.push(f64::from_le_bytes(buf));
            }
            let arr = Arr::from_shape_vec(IxDyn(&dims), data).map_err(|_| IoError::Malformed {
                path: path.display().to_string(),
                what: format!("entry {name}"),
            })?;
            entries.push((name, arr));
        }
        Ok(Archive { meta, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn f32_array_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.arr");
        let arr = Arr::from_shape_vec(IxDyn(&[2, 3]), vec![0.0, 0.5, 1.0, -1.0, 0.25, 2.0]).unwrap();
        write_array_f32(&path, &arr).unwrap();
        let back = read_array_f32(&path).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back, arr); // all values exactly representable in f32
    }

    #[test]
    fn archive_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let a = Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0f64.exp(), 2.0, -0.1, 1e-17]).unwrap();
        let arch = Archive {
            meta: vec![("epoch".into(), "3".into()), ("hash".into(), "abc".into())],
            entries: vec![("w".into(), a.clone()), ("b".into(), Arr::zeros(IxDyn(&[3])))],
        };
        arch.save(&path).unwrap();
        let back = Archive::load(&path).unwrap();
        assert_eq!(back.meta_value("epoch"), Some("3"));
        assert_eq!(back.entry("w").unwrap(), &a);
        assert_eq!(back.entries.len(), 2);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.arr");
        std::fs::write(&path, b"NOTMAGIC....").unwrap();
        assert!(matches!(
            read_array_f32(&path),
            Err(IoError::BadMagic { .. })
        ));
    }
}
