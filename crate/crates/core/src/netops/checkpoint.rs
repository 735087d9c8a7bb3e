//! `RSMC` checkpoint files: magic, format version, a UTF-8 config blob, then
//! named tensors stored as little-endian `f32`.
//!
//! ```text
//! "RSMC" | u16 version | u32 blob_len | blob
//! u32 tensor_count
//! repeat: u16 name_len | name | u32 rows | u32 cols | rows*cols f32
//! ```

use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSMC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Array2<f32>)>,
}

impl Checkpoint {
    pub fn from_store<F: Scalar>(config: impl Into<String>, store: &ParamStore<F>) -> Self {
        Self {
            config: config.into(),
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.mapv(|x| x.as_f32())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(path, bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let blob_len = r.u32()? as usize;
        let config = String::from_utf8(r.take(blob_len)?.to_vec())
            .map_err(|_| Error::format(path, "config blob is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::format(path, e.to_string()))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Copies every tensor into `store`. Unknown names, missing names and
    /// shape mismatches are all rejected before anything is written.
    pub fn load_into<F: Scalar>(&self, store: &mut ParamStore<F>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        let mut ids = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unknown tensor {name}")))?;
            let expected = store.get(id).value.dim();
            if expected != t.dim() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {name}: checkpoint {:?}, model {:?}",
                    t.dim(),
                    expected
                )));
            }
            ids.push(id);
        }
        for (id, (_, t)) in ids.into_iter().zip(&self.tensors) {
            store.get_mut(id).value.assign(&t.mapv(|x| F::of(x as f64)));
        }
        Ok(())
    }
}
