//! `NTCK` checkpoint files: a flat list of named f32 tensors.
//!
//! Layout (little-endian): magic `NTCK`, version `u32`, tensor count `u32`,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank`
//! `u32` dims and the f32 payload.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 4] = b"NTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, not a checkpoint")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("tensor {name:?}: {detail}")]
    Tensor { name: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for nt in tensors {
        let name = nt.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| CheckpointError::Tensor {
            name: nt.name.clone(),
            detail: "name longer than 65535 bytes".into(),
        })?;
        let rank = u8::try_from(nt.tensor.rank()).map_err(|_| CheckpointError::Tensor {
            name: nt.name.clone(),
            detail: "rank above 255".into(),
        })?;
        w.write_u16::<LittleEndian>(name_len)?;
        w.write_all(name)?;
        w.write_u8(rank)?;
        for &d in nt.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| CheckpointError::Tensor {
                name: nt.name.clone(),
                detail: format!("dimension {d} exceeds u32"),
            })?;
            w.write_u32::<LittleEndian>(d)?;
        }
        let mut buf = Vec::with_capacity(nt.tensor.numel() * 4);
        for &v in nt.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let rank = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Tensor {
            name: name.clone(),
            detail: e.to_string(),
        })?;
        out.push(NamedTensor { name, tensor });
    }
    Ok(out)
}
