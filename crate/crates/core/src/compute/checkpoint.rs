//! Flat binary parameter checkpoints.
//!
//! Layout: the 5-byte magic `ACIS1`, then one record per parameter until
//! end of file:
//!
//! ```text
//! u64 name_len | name (UTF-8) | u64 rank | u64 dims[rank] | f64 values[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ACIS1";

pub fn write_entries<'a, W: Write>(
    mut w: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_entries(&mut buf, store.iter().map(|(n, p)| (n, &p.value)))
        .expect("writing to a Vec cannot fail");
    buf
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8], what: &str) -> Result<u64> {
    let raw = take(bytes, 8, what)?;
    Ok(u64::from_le_bytes(raw.try_into().expect("8 bytes")))
}

pub fn decode(mut bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let magic = take(&mut bytes, MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let name_len = take_u64(&mut bytes, "name length")? as usize;
        let name = std::str::from_utf8(take(&mut bytes, name_len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_owned();
        let rank = take_u64(&mut bytes, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = take_u64(&mut bytes, "dimension")? as usize;
            if d == 0 {
                return Err(Error::Checkpoint(format!("{name}: zero dimension")));
            }
            shape.push(d);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = take(&mut bytes, count.saturating_mul(8), "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_entries(std::io::BufWriter::new(file), store.iter().map(|(n, p)| (n, &p.value)))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Overwrites every parameter of `store` from `entries`. Every parameter
/// must be present with a matching shape; extra entries are ignored.
pub fn restore(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_owned();
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let p = store.get_mut(id);
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}
