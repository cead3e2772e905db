//! "DT01" tensor file format: 4-byte magic, u8 rank, rank little-endian u32
//! extents, then row-major little-endian f64 values.

use std::io::{Read, Write};

use super::Buf;
use crate::error::{Error, Result};

pub const DT01_MAGIC: &[u8; 4] = b"DT01";

pub fn write_dt01<W: Write>(w: &mut W, shape: &[usize], values: &[f64]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    if shape.len() > u8::MAX as usize {
        return Err(Error::Data(format!("dt01: rank {} exceeds 255", shape.len())));
    }
    w.write_all(DT01_MAGIC)?;
    w.write_all(&[shape.len() as u8])?;
    for &e in shape {
        if e > u32::MAX as usize {
            return Err(Error::Data(format!("dt01: extent {e} exceeds u32")));
        }
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dt01<R: Read>(r: &mut R) -> Result<Buf> {
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, 0)?;
    if &magic != DT01_MAGIC {
        return Err(Error::Data(format!("dt01: bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    read_exact_at(r, &mut rank, 4)?;
    let rank = rank[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut offset = 5u64;
    for _ in 0..rank {
        let mut e = [0u8; 4];
        read_exact_at(r, &mut e, offset)?;
        shape.push(u32::from_le_bytes(e) as usize);
        offset += 4;
    }
    let count: usize = shape.iter().product();
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b = [0u8; 8];
        read_exact_at(r, &mut b, offset)?;
        values.push(f64::from_le_bytes(b));
        offset += 8;
    }
    Ok(Buf::new(shape, values))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Data(format!("dt01: truncated at byte offset {offset}")))
}

pub fn write_dt01_file(path: &std::path::Path, shape: &[usize], values: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dt01(&mut f, shape, values)?;
    f.flush()?;
    Ok(())
}

pub fn read_dt01_file(path: &std::path::Path) -> Result<Buf> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?,
    );
    read_dt01(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let shape = vec![2, 3];
        let values = vec![0.0, -1.5, f64::MIN_POSITIVE, 1.0e300, -0.0, 42.25];
        let mut bytes = Vec::new();
        write_dt01(&mut bytes, &shape, &values).unwrap();
        assert_eq!(&bytes[..4], DT01_MAGIC);
        assert_eq!(bytes[4], 2);
        let buf = read_dt01(&mut bytes.as_slice()).unwrap();
        assert_eq!(buf.shape, shape);
        for (a, b) in buf.values.iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = Vec::new();
        write_dt01(&mut bytes, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_dt01(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("offset"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"XX01\x01\x01\x00\x00\x00";
        assert!(read_dt01(&mut bytes.as_slice()).is_err());
    }
}
