//! Versioned weight container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  b"LCHKPT\0\0"
//! u32    format version
//! u64    header length, then that many bytes of JSON:
//!        { "kind", "config", "params": [{ "name", "shape" }], "extra" }
//! f64[]  parameter values in header order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LCHKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// A decoded checkpoint before it is bound to a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
    arrays: Vec<(ParamEntry, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(kind: &str, config: serde_json::Value, extra: serde_json::Value, store: &ParamStore) -> Self {
        let arrays = store
            .iter()
            .map(|(_, p)| {
                (
                    ParamEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                    },
                    p.value.data().to_vec(),
                )
            })
            .collect();
        Self {
            kind: kind.to_string(),
            config,
            extra,
            arrays,
        }
    }

    /// Copies the stored arrays into a freshly built store with identical layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameter arrays, checkpoint has {}",
                store.len(),
                self.arrays.len()
            )));
        }
        for ((_, p), (entry, data)) in store.iter_mut().zip(&self.arrays) {
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model {} {:?} vs checkpoint {} {:?}",
                    p.name,
                    p.value.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            p.value.data_mut().copy_from_slice(data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            params: self.arrays.iter().map(|(e, _)| e.clone()).collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in &self.arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32b = [0u8; 4];
        read_exact(&mut r, &mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut u64b = [0u8; 8];
        read_exact(&mut r, &mut u64b)?;
        let len = u64::from_le_bytes(u64b) as usize;
        if r.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut arrays = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            if r.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated data for {}", entry.name)));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[n * 8..];
            arrays.push((entry, data));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            extra: header.extra,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}
