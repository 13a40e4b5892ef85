//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TBV15"            5-byte magic
//! version: u32
//! repeated until EOF:
//!   name_len: u32, name: UTF-8 bytes
//!   rank: u32, dims: rank × u64
//!   payload: numel × f64
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{NumError, Tensor};

pub const MAGIC: &[u8; 5] = b"TBV15";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_records<W: Write>(mut w: W, records: &[(String, Tensor)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8], NumError> {
    if *pos + n > buf.len() {
        return Err(NumError::Checkpoint(format!("truncated checkpoint while reading {what} at byte {}", *pos)));
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_u32(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32, NumError> {
    Ok(u32::from_le_bytes(take(buf, pos, 4, what)?.try_into().unwrap()))
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NumError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| NumError::Checkpoint(e.to_string()))?;
    let mut pos = 0;
    if take(&buf, &mut pos, 5, "magic")? != MAGIC {
        return Err(NumError::Checkpoint("bad magic, not a TBV15 checkpoint".into()));
    }
    let version = read_u32(&buf, &mut pos, "version")?;
    if version != FORMAT_VERSION {
        return Err(NumError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while pos < buf.len() {
        let len = read_u32(&buf, &mut pos, "name length")? as usize;
        let name = std::str::from_utf8(take(&buf, &mut pos, len, "name")?)
            .map_err(|e| NumError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = read_u32(&buf, &mut pos, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(&buf, &mut pos, 8, "dims")?.try_into().unwrap());
            shape.push(d as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = take(&buf, &mut pos, numel * 8, &format!("payload of {name}"))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, records: &[(String, Tensor)]) -> Result<(), NumError> {
    let mut buf = Vec::new();
    write_records(&mut buf, records).map_err(|e| NumError::Checkpoint(e.to_string()))?;
    fs::write(path, buf).map_err(|e| NumError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, NumError> {
    let f = fs::File::open(path).map_err(|e| NumError::Checkpoint(format!("{}: {e}", path.display())))?;
    read_records(io::BufReader::new(f))
}
