//! Versioned binary checkpoints.
//!
//! Layout (little endian): `b"MIERCKPT"`, `u32` version, `u32` config
//! length + UTF-8 JSON config, `u32` tensor count, then per tensor a `u32`
//! name length + name, `u32` rows, `u32` cols and `rows·cols` `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MIERCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, DenseMatrix)>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Checkpoint {
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: &DenseMatrix) {
        self.tensors.push((name.into(), m.clone()));
    }

    /// Looks up a tensor and checks it has the expected shape.
    pub fn tensor(&self, name: &str, shape: (usize, usize)) -> Result<DenseMatrix> {
        let (_, m) = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::data(format!("checkpoint has no tensor `{name}`")))?;
        if m.shape() != shape {
            return Err(Error::Shape(format!(
                "checkpoint tensor `{name}` is {}x{}, model expects {}x{}",
                m.rows, m.cols, shape.0, shape.1
            )));
        }
        Ok(m.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("JSON value serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        read_exact(&mut r, &mut cfg)?;
        let config = serde_json::from_slice(&cfg)?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::data("tensor name is not UTF-8"))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, DenseMatrix { rows, cols, data }));
        }
        if !r.is_empty() {
            return Err(Error::data(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::data("checkpoint is truncated"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
