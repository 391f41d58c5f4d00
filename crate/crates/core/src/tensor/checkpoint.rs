//! Binary parameter checkpoints.
//!
//! Layout: the 4-byte magic `CDF1`, then one record per parameter until end of
//! file. A record is the name length (u64), the UTF-8 name, the rank (u64), one
//! u64 per extent, and the values as f32. Every number is little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDF1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint truncated inside record {0:?}")]
    Truncated(String),
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("implausible record for {name:?}: {detail}")]
    Corrupt { name: String, detail: String },
}

pub fn write_checkpoint(path: &Path, params: &ParamStore<f32>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore<f32>, CheckpointError> {
    decode(&mut BufReader::new(File::open(path)?))
}

pub(crate) fn encode(w: &mut impl Write, params: &ParamStore<f32>) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, p) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &e in shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads exactly `buf.len()` bytes; `Ok(false)` on a clean EOF before any byte.
fn read_or_eof(r: &mut impl Read, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn read_u64(r: &mut impl Read, name: &str) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Truncated(name.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn decode(r: &mut impl Read) -> Result<ParamStore<f32>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut store = ParamStore::new();
    loop {
        let mut len = [0u8; 8];
        match read_or_eof(r, &mut len) {
            Ok(false) => break,
            Ok(true) => {}
            Err(_) => return Err(CheckpointError::Truncated("<name length>".into())),
        }
        let len = u64::from_le_bytes(len) as usize;
        if len > 4096 {
            return Err(CheckpointError::Corrupt {
                name: String::new(),
                detail: format!("name length {len}"),
            });
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| CheckpointError::Truncated("<name>".into()))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
        let rank = read_u64(r, &name)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt {
                name,
                detail: format!("rank {rank}"),
            });
        }
        let shape = (0..rank)
            .map(|_| read_u64(r, &name).map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&c| c <= 1 << 31)
            .ok_or_else(|| CheckpointError::Corrupt {
                name: name.clone(),
                detail: format!("shape {shape:?}"),
            })?;
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)
            .map_err(|_| CheckpointError::Truncated(name.clone()))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).expect("count matches shape");
        store.insert(name, tensor);
    }
    Ok(store)
}
