//! Checkpoint container: magic `TCLR`, version, embedded JSON config
//! snapshot, then a named tensor table with little-endian `f32` payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use super::{NnError, Tensor};

pub const MAGIC: &[u8; 4] = b"TCLR";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Free-form snapshot of the run configuration that produced the weights.
    pub run_config: serde_json::Value,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, CheckpointError> {
    if n > 1 << 30 {
        return Err(CheckpointError::Corrupt(format!("length {n} is implausible")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let header = serde_json::to_vec(&Header {
        model: ckpt.params.config.clone(),
        run: ckpt.run_config.clone(),
    })?;
    write_u32(&mut w, header.len() as u32)?;
    w.write_all(&header)?;
    write_u32(&mut w, ckpt.params.tensors.len() as u32)?;
    for (name, t) in ckpt.params.names.iter().zip(&ckpt.params.tensors) {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape.len() as u32)?;
        for d in &t.shape {
            write_u32(&mut w, *d as u32)?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let n = read_u32(&mut r)? as usize;
    let header: Header = serde_json::from_slice(&read_bytes(&mut r, n)?)?;
    let count = read_u32(&mut r)? as usize;
    let mut named = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, n)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Corrupt(format!("{ndim} dimensions")));
        }
        let shape = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let bytes = read_bytes(&mut r, len * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        params: ModelParams::from_tensors(header.model, named)?,
        run_config: header.run,
    })
}
