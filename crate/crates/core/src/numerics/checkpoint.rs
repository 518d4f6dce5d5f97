//! Flat binary container of named f64 arrays.
//!
//! Layout: the 7-byte magic `ADADPM1`, a little-endian `u64` header length,
//! a JSON header `{"tensors":[{"name","shape":[rows,cols],"offset"}]}` and
//! then the data section of little-endian f64 values. Offsets are byte
//! offsets into the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"ADADPM1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
}

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        entries.push(Entry {
            name: (*name).to_string(),
            shape: t.shape(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header { tensors: entries })
        .map_err(|e| Error::format("checkpoint header", e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in &tensors {
        let mut buf = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint", "truncated before magic"))?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::format("checkpoint", "truncated header length at byte 7"))?;
    let hlen = u64::from_le_bytes(len) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)
        .map_err(|_| Error::format("checkpoint", format!("truncated header at byte 15 (expected {hlen} bytes)")))?;
    let header: Header =
        serde_json::from_slice(&hbytes).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "tensor `{}` needs data bytes {start}..{end}, only {} present",
                    e.name,
                    data.len()
                ),
            ));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.name, Tensor::from_vec(e.shape[0], e.shape[1], values)?));
    }
    Ok(out)
}

pub fn save_store(store: &ParameterStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(f), store.iter())
}

/// Loads every tensor of the file into a fresh store.
pub fn load_store(path: &Path) -> Result<ParameterStore> {
    let f = std::fs::File::open(path)?;
    let mut store = ParameterStore::new();
    for (name, t) in read_tensors(std::io::BufReader::new(f))? {
        store.insert(&name, t);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::from_rows(&[vec![1.0, -0.0, f64::MIN_POSITIVE], vec![1e300, -3.25, 0.1]]);
        let b = Tensor::zeros(0, 4);
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("a", &a), ("empty", &b)]).unwrap();
        assert_eq!(&buf[..7], b"ADADPM1");
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back[0].0, "a");
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].1.shape(), [0, 4]);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("a", &a)]).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_tensors(&buf[..]).unwrap_err().to_string();
        assert!(err.contains("only 13 present"), "{err}");
        assert!(read_tensors(&b"ADAD"[..]).is_err());
        assert!(read_tensors(&b"XXXXXXX\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}
