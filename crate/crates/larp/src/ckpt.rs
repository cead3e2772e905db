//! "CK01" checkpoint bundles: named DT01 tensors in a fixed order.
//!
//! Layout: 4-byte magic, u32 entry count, then per entry a u16 name length,
//! the UTF-8 name, and one DT01 tensor.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::io::{read_dt01, write_dt01};
use crate::tensor::Buf;

pub const CK01_MAGIC: &[u8; 4] = b"CK01";

pub fn write_ck01<W: Write>(w: &mut W, entries: &[(String, Buf)]) -> Result<()> {
    w.write_all(CK01_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, buf) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Data(format!("ck01: name too long ({} bytes)", bytes.len())));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_dt01(w, &buf.shape, &buf.values)?;
    }
    Ok(())
}

pub fn read_ck01<R: Read>(r: &mut R) -> Result<Vec<(String, Buf)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Data("ck01: truncated at byte offset 0".into()))?;
    if &magic != CK01_MAGIC {
        return Err(Error::Data(format!("ck01: bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::Data("ck01: truncated at byte offset 4".into()))?;
    let count = u32::from_le_bytes(word) as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(|_| Error::Data(format!("ck01: truncated before entry {i}")))?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|_| Error::Data(format!("ck01: truncated name of entry {i}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Data(format!("ck01: entry {i} name not UTF-8")))?;
        let buf = read_dt01(r).map_err(|e| Error::Data(format!("ck01: entry {name}: {e}")))?;
        entries.push((name, buf));
    }
    Ok(entries)
}

/// Pack a u64 as two exactly-representable f64 halves.
pub fn u64_to_f64_pair(x: u64) -> [f64; 2] {
    [(x >> 32) as f64, (x & 0xFFFF_FFFF) as f64]
}

pub fn f64_pair_to_u64(hi: f64, lo: f64) -> u64 {
    ((hi as u64) << 32) | (lo as u64)
}

/// Config text stored as one byte per f64 value (lossless, stays inside the
/// tensor-only bundle format).
pub fn text_to_values(text: &str) -> Vec<f64> {
    text.bytes().map(|b| b as f64).collect()
}

pub fn values_to_text(values: &[f64]) -> Result<String> {
    let bytes: Vec<u8> = values.iter().map(|v| *v as u8).collect();
    String::from_utf8(bytes).map_err(|_| Error::Data("ck01: embedded config is not UTF-8".into()))
}
