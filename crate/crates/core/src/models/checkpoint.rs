//! Binary tensor checkpoints.
//!
//! Layout: magic `CSYN`, format version `u32`, tensor count `u32`, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and
//! the row-major little-endian `f64` payload.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 4] = b"CSYN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: [usize; 2],
        expected: [usize; 2],
    },
}

pub type NamedTensors = Vec<(String, Tensor<f64>)>;

pub fn write_to<W: Write>(
    mut w: W,
    tensors: &[(String, Tensor<f64>)],
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[2u8])?;
        for d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Malformed("truncated".into()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(buf)
}

pub fn read_from<R: Read>(mut r: R) -> Result<NamedTensors, CheckpointError> {
    if &read_exact::<4, _>(&mut r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version > FORMAT_VERSION || version == 0 {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("non-UTF-8 tensor name".into()))?;
        let rank = read_exact::<1, _>(&mut r)?[0] as usize;
        if rank > 2 {
            return Err(CheckpointError::Malformed(format!(
                "tensor `{name}` has rank {rank}"
            )));
        }
        let mut dims = [1usize; 2];
        for k in 0..rank {
            dims[2 - rank + k] = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` too large")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        let t = Tensor::from_vec(dims[0], dims[1], data).expect("length matches dims");
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f64>)]) -> Result<(), CheckpointError> {
    write_to(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: &Path) -> Result<NamedTensors, CheckpointError> {
    read_from(BufReader::new(File::open(path)?))
}

/// Looks up a tensor by name.
pub fn find<'a>(
    tensors: &'a [(String, Tensor<f64>)],
    name: &str,
) -> Result<&'a Tensor<f64>, CheckpointError> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))
}

/// Reads a `config.*` scalar.
pub fn config_value(tensors: &[(String, Tensor<f64>)], key: &str) -> Result<f64, CheckpointError> {
    let t = find(tensors, &format!("config.{key}"))?;
    if t.len() != 1 {
        return Err(CheckpointError::Malformed(format!(
            "config.{key} is not a scalar"
        )));
    }
    Ok(t.item())
}

pub fn config_usize(
    tensors: &[(String, Tensor<f64>)],
    key: &str,
) -> Result<usize, CheckpointError> {
    let v = config_value(tensors, key)?;
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(CheckpointError::Malformed(format!(
            "config.{key} = {v} is not a count"
        )));
    }
    Ok(v as usize)
}

pub fn config_entry(key: &str, value: f64) -> (String, Tensor<f64>) {
    (format!("config.{key}"), Tensor::scalar(value))
}
