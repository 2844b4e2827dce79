//! Binary checkpoints: named float64 arrays in a single file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GSGW"   magic, 4 bytes
//! u32      format version (currently 1)
//! u32      array count
//! per array:
//!   u32    name length in bytes
//!   ...    UTF-8 name
//!   u64    element count
//!   ...    f64 little-endian values
//! ```
//!
//! The format is dependency-free and parseable from any language in a dozen
//! lines. It carries whatever a command wants to resume from — parameter
//! vectors, feature matrices, optimizer moments — as flat arrays keyed by
//! name; interpreting the shapes is the writer's business.

use std::path::Path;

use gsgw::mesh_io::write_atomic;
use gsgw::{GsgwError, Result};

pub const MAGIC: [u8; 4] = *b"GSGW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint { arrays: Vec::new() }
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if self.arrays.iter().any(|(n, _)| n == name) {
            return Err(GsgwError::invalid(format!(
                "checkpoint already holds an array named {name:?}"
            )));
        }
        self.arrays.push((name.to_string(), values));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name).ok_or_else(|| {
            GsgwError::invalid(format!("checkpoint has no array named {name:?}"))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let payload: usize = self
            .arrays
            .iter()
            .map(|(n, v)| 4 + n.len() + 8 + 8 * v.len())
            .sum();
        let mut bytes = Vec::with_capacity(12 + payload);
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader {
            path,
            bytes: &bytes,
            pos: 0,
        };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.err("magic", format!("expected GSGW, got {magic:?}")));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(r.err("version", format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.take(4, "array count")?.try_into().unwrap());
        let mut ck = Checkpoint::new();
        for idx in 0..count {
            let what = format!("array {idx} name length");
            let name_len = u32::from_le_bytes(r.take(4, &what)?.try_into().unwrap()) as usize;
            let name_bytes = r.take(name_len, "array name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|e| r.err("array name", e.to_string()))?
                .to_string();
            let len = u64::from_le_bytes(r.take(8, "array length")?.try_into().unwrap()) as usize;
            let raw = r.take(8 * len, &format!("array {name:?} values"))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.push(&name, values)
                .map_err(|_| r.err("array name", format!("duplicate array {name:?}")))?;
        }
        if r.pos != bytes.len() {
            return Err(r.err(
                "end of file",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(what, format!("needs {n} bytes, file has {} left",
                self.bytes.len() - self.pos)));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn err(&self, what: &str, message: String) -> GsgwError {
        GsgwError::Parse {
            path: self.path.display().to_string(),
            location: format!("byte {} ({what})", self.pos),
            message,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_order_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ck = Checkpoint::new();
        ck.push("params", vec![1.5, -0.25, 4.9e-324, 0.1 + 0.2]).unwrap();
        ck.push("moments", vec![]).unwrap();
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["params", "moments"]);
        let p = back.get("params").unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[2].to_bits(), 4.9e-324f64.to_bits());
        assert_eq!(p[3].to_bits(), (0.1f64 + 0.2).to_bits());
        assert!(back.get("moments").unwrap().is_empty());
    }

    #[test]
    fn bad_magic_and_truncation_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        let err = Checkpoint::read(&path).unwrap_err();
        assert!(matches!(err, GsgwError::Parse { .. }), "{err}");

        let mut ck = Checkpoint::new();
        ck.push("a", vec![1.0, 2.0]).unwrap();
        ck.write(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        let err = Checkpoint::read(&path).unwrap_err();
        match err {
            GsgwError::Parse { path: p, .. } => assert!(p.contains("bad.ckpt")),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ck = Checkpoint::new();
        ck.push("a", vec![1.0]).unwrap();
        assert!(ck.push("a", vec![2.0]).is_err());
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut ck = Checkpoint::new();
        ck.push("a", vec![1.0]).unwrap();
        ck.write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::read(&path).is_err());
    }
}
