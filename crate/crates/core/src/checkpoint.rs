//! Binary checkpoint format.
//!
//! ```text
//! "DEIGCKPT"            8 bytes
//! version               u32
//! entry count           u32
//! per entry:
//!   name length         u32, then UTF-8 name
//!   rank                u32, then extents as u64
//!   payload             f64 little-endian, row-major
//! crc32                 u32 over every preceding byte
//! ```
//!
//! All integers are little-endian. Non-numeric data (vocabulary, config) is
//! stored as entries whose payload holds one byte value per element.

use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"DEIGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed entry: {0}")]
    Malformed(String),
    #[error("missing entry {0:?}")]
    Missing(String),
    #[error("entry {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn from_bytes(name: &str, bytes: &[u8]) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![bytes.len()],
            data: bytes.iter().map(|&b| f64::from(b)).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        self.data
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(CheckpointError::Malformed(format!("{} is not a byte entry", self.name)))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            entries: store
                .iter()
                .map(|(_, p)| Entry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.to_vec(),
                })
                .collect(),
        }
    }

    pub fn push_bytes(&mut self, name: &str, bytes: &[u8]) {
        self.entries.push(Entry::from_bytes(name, bytes));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copies every parameter of `store` from the matching entry.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.param(id);
            let e = self.get(&p.name).ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            if e.shape != p.tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    found: e.shape.clone(),
                    expected: p.tensor.shape().to_vec(),
                });
            }
            store
                .set_data(id, e.data.clone())
                .map_err(|err| CheckpointError::Malformed(err.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 12 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            entries.push(Entry { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes before checksum".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            entries: vec![
                Entry {
                    name: "ide.queries".into(),
                    shape: vec![1, 2],
                    data: vec![0.5, -1.25],
                },
                Entry::from_bytes("text_sim.vocab", b"a\nred"),
            ],
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = Checkpoint {
            entries: vec![Entry {
                name: "w".into(),
                shape: vec![1],
                data: vec![1.0],
            }],
        }
        .to_bytes();
        let mut expected = b"DEIGCKPT".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        let crc = crc32fast::hash(&expected);
        expected.extend(crc.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn roundtrip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("text_sim.vocab").unwrap().to_bytes().unwrap(), b"a\nred");
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum { .. })));
        let mut bad = sample().to_bytes();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
    }
}
