//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "MMEV"
//! version  u32      1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, extents (rank × u64)
//!   values   product(extents) × f64
//! ```
//!
//! Values are always stored as f64, so an f32 build round-trips exactly too.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Real, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMEV";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u32 = 16;

pub fn write_checkpoint<'a, W, I>(mut w: W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(
        &u32::try_from(tensors.len())
            .map_err(|_| too_many())?
            .to_le_bytes(),
    )?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        w.write_all(
            &u32::try_from(nb.len())
                .map_err(|_| too_many())?
                .to_le_bytes(),
        )?;
        w.write_all(nb)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn too_many() -> TensorError {
    TensorError::Checkpoint("size exceeds u32".into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        TensorError::Checkpoint("truncated file".into())
    } else {
        TensorError::Io(e)
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank > MAX_RANK {
            return Err(TensorError::Checkpoint(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = usize::try_from(read_u64(&mut r)?)
                .map_err(|_| TensorError::Checkpoint("extent overflow".into()))?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| TensorError::Checkpoint("element count overflow".into()))?;
            shape.push(e);
        }
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        let mut b = [0; 8];
        for _ in 0..numel {
            r.read_exact(&mut b).map_err(truncated)?;
            data.push(f64::from_le_bytes(b) as Real);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint<'a, I>(path: impl AsRef<Path>, tensors: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let f = File::create(path)?;
    write_checkpoint(BufWriter::new(f), tensors)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let f = File::open(path)?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2], vec![1.5, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("ab", &t)]).unwrap();
        assert_eq!(&buf[..4], b"MMEV");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..18], b"ab");
        assert_eq!(&buf[18..22], &1u32.to_le_bytes());
        assert_eq!(&buf[22..30], &2u64.to_le_bytes());
        assert_eq!(&buf[30..38], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 46);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let t = Tensor::ones([3]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        match read_checkpoint(&buf[..]) {
            Err(TensorError::Checkpoint(msg)) => assert!(msg.contains("truncated")),
            other => panic!("{other:?}"),
        }
    }
}
