//! Single-file checkpoint container.
//!
//! Layout: the magic line `LAYERDIFF-CKPT-1\n`, a little-endian `u64` header
//! length, a JSON header (kind, config, vocabulary, tensor index), then the
//! raw little-endian `f32` tensor data in index order.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8] = b"LAYERDIFF-CKPT-1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes every parameter of `params` (as `f32`).
pub fn save(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    extra: serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut blobs = Vec::with_capacity(params.len());
    for (name, var) in params.iter() {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
        });
        blobs.push(var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
    }
    let header = Header {
        kind: kind.to_string(),
        config,
        extra,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for blob in blobs {
        for v in blob {
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// A checkpoint read back from disk.
pub struct Loaded {
    pub path: PathBuf,
    pub header: Header,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| ckpt_err(path, "file too short for magic"))?;
    if magic != MAGIC {
        return Err(ckpt_err(path, "bad magic, not a LAYERDIFF-CKPT-1 file"));
    }
    let len = r
        .read_u64::<LittleEndian>()
        .map_err(|_| ckpt_err(path, "truncated header length"))?;
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| ckpt_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| ckpt_err(path, format!("truncated data for {}", e.name)))?;
        tensors.push((e.name.clone(), e.shape.clone(), data));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(ckpt_err(path, "trailing bytes after tensor data"));
    }
    Ok(Loaded {
        path: path.to_path_buf(),
        header,
        tensors,
    })
}

impl Loaded {
    /// Copies stored tensors into `params`; names and shapes must match
    /// exactly.
    pub fn restore_into(&self, params: &ParamStore) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(ckpt_err(
                &self.path,
                format!(
                    "checkpoint has {} tensors, model expects {}",
                    self.tensors.len(),
                    params.len()
                ),
            ));
        }
        for (name, shape, data) in &self.tensors {
            if params.get(name).is_none() {
                return Err(ckpt_err(&self.path, format!("unexpected tensor {name}")));
            }
            let t = Tensor::from_slice(data, shape.as_slice(), params.device())?;
            params.set(name, &t)?;
        }
        Ok(())
    }
}
