//! `NODT` tensor records and named parameter archives.
//!
//! Tensor record: `b"NODT"`, version `0x01`, dtype `0x00` (f32), rank byte,
//! `rank` little-endian `u32` extents, then the row-major little-endian f32
//! payload. Archive: little-endian `u32` entry count, then per entry a `u16`
//! name length, the UTF-8 name and one embedded tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NODT";
const VERSION: u8 = 0x01;
const DTYPE_F32: u8 = 0x00;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor<f32>) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Format(format!("rank {} exceeds 255", t.rank())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F32, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(TensorError::Format("bad magic, expected NODT".into()));
    }
    if head[4] != VERSION {
        return Err(TensorError::Format(format!("unsupported version {:#04x}", head[4])));
    }
    if head[5] != DTYPE_F32 {
        return Err(TensorError::Format(format!("unsupported dtype {:#04x}", head[5])));
    }
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut word = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_tensor(BufReader::new(File::open(path)?))
}

pub fn write_archive<'a, W, I>(mut w: W, entries: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
    I::IntoIter: ExactSizeIterator,
{
    let entries = entries.into_iter();
    let count = u32::try_from(entries.len()).map_err(|_| TensorError::Format("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| TensorError::Format(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, t)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Format("entry name is not UTF-8".into()))?;
        out.push((name, read_tensor(&mut r)?));
    }
    Ok(out)
}
