//! Binary checkpoint container: one JSON header line, then little-endian
//! `f32` tensor data at the byte offsets the header lists.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "make-vlp-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the first byte after the header line.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    /// Free-form metadata owned by the writer (model config, counters, RNG).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus metadata, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header { format: FORMAT.into(), version: VERSION, meta: self.meta.clone(), tensors: entries };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Io(io::Error::other(e)))?;
        out.push(b'\n');
        out.reserve(offset as usize);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint header is incomplete")));
        }
        let header: Header = serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| Error::VersionMismatch(format!("unreadable header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::VersionMismatch(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                header.format, header.version
            )));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > body.len() {
                return Err(Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, format!("tensor {} is truncated", e.name))));
            }
            let data = body[start..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_reader(f)
    }
}
