//! Binary checkpoint format.
//!
//! ```text
//! "SLRF"            4 bytes magic
//! version           u32 LE
//! repeated until EOF:
//!   name_len        u32 LE
//!   name            UTF-8 bytes
//!   rank            u32 LE
//!   dims            rank x u64 LE
//!   payload         prod(dims) x f32 LE
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::{Array, Result, TensorError};

pub const MAGIC: &[u8; 4] = b"SLRF";
pub const VERSION: u32 = 1;

pub fn write_records<W: Write>(mut w: W, records: &[(String, Array<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, a) in records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(a.rank() as u32).to_le_bytes())?;
        for &d in a.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(a.len() * 4);
        for &x in a.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_bytes(records: &[(String, Array<f32>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records(&mut buf, records).expect("writing to a Vec cannot fail");
    buf
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TensorError::Checkpoint(format!("truncated while reading {what}")),
        _ => TensorError::Io(e),
    })
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Array<f32>)>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or(&mut r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        // A clean EOF is only allowed at a record boundary.
        let mut first = [0u8; 1];
        match r.read(&mut first)? {
            0 => break,
            _ => {
                u32buf[0] = first[0];
                read_exact_or(&mut r, &mut u32buf[1..], "name length")?;
            }
        }
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        read_exact_or(&mut r, &mut u32buf, "rank")?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 8];
            read_exact_or(&mut r, &mut d, "dims")?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact_or(&mut r, &mut payload, &format!("payload of `{name}`"))?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Array::new(shape, data)?));
    }
    Ok(out)
}

/// Writes atomically through a temporary file in the same directory.
pub fn save(path: &Path, records: &[(String, Array<f32>)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = fs::File::create(&tmp)?;
        write_records(io::BufWriter::new(f), records)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Array<f32>)>> {
    let f = fs::File::open(path)?;
    read_records(io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_little_endian() {
        let a = Array::new([2], vec![1.0f32, -2.5]).unwrap();
        let bytes = to_bytes(&[("ab".to_string(), a)]);
        let mut want = b"SLRF".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.extend(1u32.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_records(&b"NOPE\x01\0\0\0"[..]).is_err());
        let a = Array::new([3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = to_bytes(&[("x".to_string(), a)]);
        let err = read_records(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn scalar_record_round_trips() {
        let recs = vec![("s".to_string(), Array::scalar(7.5f32))];
        let back = read_records(&to_bytes(&recs)[..]).unwrap();
        assert_eq!(back, recs);
    }
}
