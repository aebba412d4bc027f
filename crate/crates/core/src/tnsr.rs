//! `TNSR` tensor files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "TNSR"
//! 4       1           version (1)
//! 5       1           dtype (1 = float32 little-endian)
//! 6       4           rank, u32 LE
//! 10      4 * rank    dims, u32 LE each
//! ...     4 * prod    payload, row-major f32 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn write_tnsr<W: Write>(mut out: W, t: &Tensor) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION, DTYPE_F32])?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_tnsr<R: Read>(mut r: R) -> Result<Tensor> {
    let mut header = [0u8; 6];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected \"TNSR\"".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    if header[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", header[5])));
    }
    let rank = read_u32(&mut r, "rank")? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(&mut r, "dims")? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n <= (1 << 31))
        .ok_or_else(|| Error::Format(format!("invalid dims {dims:?}")))?;
    let mut payload = vec![0u8; 4 * n];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("payload shorter than {} bytes", 4 * n)))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(dims, data)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tnsr(BufWriter::new(File::create(path)?), t)
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tnsr(BufReader::new(File::open(path)?))
}
