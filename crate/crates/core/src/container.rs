//! Little-endian binary container helpers shared by the on-disk formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    Ok(())
}

pub(crate) fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a u64 element count followed by the values as f64.
pub(crate) fn write_f64_blob<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    write_u64(w, values.len() as u64)?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_text<W: Write>(w: &mut W, text: &str) -> Result<()> {
    write_u64(w, text.len() as u64)?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Upper bound on blob sizes accepted from disk (guards against corrupt headers).
const MAX_BLOB: u64 = 1 << 32;

pub(crate) fn read_f64_blob<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = read_u64(r)?;
    if n > MAX_BLOB {
        return Err(Error::Format(format!("blob length {n} out of range")));
    }
    let mut bytes = vec![0u8; n as usize * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn read_text<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u64(r)?;
    if n > MAX_BLOB {
        return Err(Error::Format(format!("text block length {n} out of range")));
    }
    let mut bytes = vec![0u8; n as usize];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("text block is not UTF-8: {e}")))
}
