//! ASCV: a tiny bit-exact binary tensor container.
//!
//! Layout: magic `ASCV` (4 bytes), version `u32` LE (= 1), rank `u32` LE,
//! dims rank x `u64` LE, dtype tag `u32` LE (1 = f64 LE), then the payload
//! in row-major order. Volumes are rank 4, masks rank 3 (0.0 / 1.0),
//! parameter vectors rank 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AvError, Result};
use crate::volume::{ForegroundMask, Volume};

const MAGIC: &[u8; 4] = b"ASCV";
const VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;

/// Write a tensor of any rank.
pub fn write_ascv(path: &Path, dims: &[u64], data: &[f64]) -> Result<()> {
    let expected: u64 = dims.iter().product();
    if expected != data.len() as u64 {
        return Err(AvError::invalid(format!(
            "ascv payload length {} does not match dims {:?}",
            data.len(),
            dims
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&DTYPE_F64.to_le_bytes())?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a tensor of any rank.
pub fn read_ascv(path: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AvError::invalid("not an ASCV file: bad magic"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(AvError::invalid(format!("unsupported ascv version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    if rank > 8 {
        return Err(AvError::invalid(format!("implausible ascv rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut buf8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf8)?;
        dims.push(u64::from_le_bytes(buf8));
    }
    r.read_exact(&mut buf4)?;
    let dtype = u32::from_le_bytes(buf4);
    if dtype != DTYPE_F64 {
        return Err(AvError::invalid(format!("unsupported ascv dtype {dtype}")));
    }
    let total: u64 = dims.iter().product();
    if total > (1 << 32) {
        return Err(AvError::invalid("ascv tensor too large"));
    }
    let mut data = Vec::with_capacity(total as usize);
    for _ in 0..total {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    // trailing bytes indicate corruption
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(AvError::invalid("ascv file has trailing bytes"));
    }
    Ok((dims, data))
}

pub fn write_volume(path: &Path, v: &Volume<f64>) -> Result<()> {
    let dims = [
        v.frames as u64,
        v.channels as u64,
        v.height as u64,
        v.width as u64,
    ];
    write_ascv(path, &dims, &v.data)
}

pub fn read_volume(path: &Path) -> Result<Volume<f64>> {
    let (dims, data) = read_ascv(path)?;
    if dims.len() != 4 {
        return Err(AvError::invalid(format!(
            "expected rank-4 volume, got rank {}",
            dims.len()
        )));
    }
    Volume::from_vec(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
        data,
    )
}

pub fn write_params(path: &Path, data: &[f64]) -> Result<()> {
    write_ascv(path, &[data.len() as u64], data)
}

pub fn read_params(path: &Path) -> Result<Vec<f64>> {
    let (dims, data) = read_ascv(path)?;
    if dims.len() != 1 {
        return Err(AvError::invalid("expected rank-1 parameter vector"));
    }
    Ok(data)
}

pub fn write_mask(path: &Path, m: &ForegroundMask) -> Result<()> {
    let data: Vec<f64> = m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_ascv(
        path,
        &[m.frames as u64, m.height as u64, m.width as u64],
        &data,
    )
}

pub fn read_mask(path: &Path) -> Result<ForegroundMask> {
    let (dims, data) = read_ascv(path)?;
    if dims.len() != 3 {
        return Err(AvError::invalid("expected rank-3 mask"));
    }
    for &v in &data {
        if v != 0.0 && v != 1.0 {
            return Err(AvError::invalid("mask values must be exactly 0 or 1"));
        }
    }
    ForegroundMask::new(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        data.into_iter().map(|v| v == 1.0).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ascv");
        let v = Volume::from_vec(
            2,
            3,
            2,
            2,
            (0..24).map(|i| (i as f64) * 0.125 - 1.0).collect(),
        )
        .unwrap();
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn mask_and_params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.ascv");
        let pp = dir.path().join("p.ascv");
        let mut m = ForegroundMask::zeros(2, 3, 3);
        m.set(0, 1, 2, true);
        m.set(1, 0, 0, true);
        write_mask(&mp, &m).unwrap();
        assert_eq!(read_mask(&mp).unwrap(), m);
        let params = vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE];
        write_params(&pp, &params).unwrap();
        assert_eq!(read_params(&pp).unwrap(), params);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ascv");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_ascv(&path).is_err());
        // valid header, truncated payload
        let good = dir.path().join("trunc.ascv");
        write_ascv(&good, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&good, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_ascv(&good).is_err());
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ascv");
        write_ascv(&path, &[2, 3], &[0.0; 6]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"ASCV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 32 + 6 * 8);
    }
}
