//! Versioned tensor container used for checkpoints and extractor weight
//! files.
//!
//! Layout: magic `VQEC`, `u32` version, `u64` header length, a JSON header
//! (`kind`, free-form `meta`, and a tensor index with names and shapes),
//! then all tensor data as little-endian f32 in index order. Bit-exact
//! round trips: f32 payloads are written and read as raw bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Params, Scalar};

const MAGIC: &[u8; 4] = b"VQEC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// In-memory image of a container file.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), shape, data));
    }

    /// Add every tensor of a registry under a name prefix.
    pub fn push_params<F: Scalar>(&mut self, prefix: &str, params: &Params<F>) {
        for (name, value, _) in params.iter() {
            self.push_tensor(
                format!("{prefix}{name}"),
                value.shape().to_vec(),
                value.iter().map(|&v| v.to_f64() as f32).collect(),
            );
        }
    }

    pub fn find(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    /// Restore every tensor of a registry from `prefix`-qualified entries;
    /// every parameter must be present with a matching shape.
    pub fn load_params<F: Scalar>(&self, prefix: &str, params: &mut Params<F>) -> Result<()> {
        for id in params.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", params.name(id));
            let Some((_, shape, data)) = self.find(&name) else {
                return Err(Error::Checkpoint(format!("missing tensor {name}")));
            };
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: file {:?}, model {:?}",
                    shape,
                    params.get(id).shape()
                )));
            }
            let arr = ndarray::ArrayD::from_shape_vec(
                ndarray::IxDyn(shape),
                data.iter().map(|&v| F::from_f64(v as f64)).collect(),
            )
            .unwrap();
            params.set(id, arr);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for (_, _, data) in &self.tensors {
            for v in data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a tensor container (bad magic)".into()));
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "container version {version}, expected {VERSION}"
            )));
        }
        let mut l8 = [0u8; 8];
        r.read_exact(&mut l8)?;
        let header_len = u64::from_le_bytes(l8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)?;
            let data: Vec<f32> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((entry.name, entry.shape, data));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vqec");
        let mut c = Container::new("test", serde_json::json!({"step": 3}));
        let data = vec![0.1f32, -2.5e-8, f32::MIN_POSITIVE, 1.0];
        c.push_tensor("a.weight", vec![2, 2], data.clone());
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta["step"], 3);
        let (_, shape, got) = back.find("a.weight").unwrap();
        assert_eq!(shape, &vec![2, 2]);
        for (x, y) in data.iter().zip(got) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(Container::load(&path), Err(Error::Checkpoint(_))));
    }
}
