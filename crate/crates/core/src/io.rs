//! Little-endian binary helpers and the tensor checkpoint container shared
//! by the `MVQ1` and `MDN1` formats.
//!
//! Checkpoint layout: 4-byte magic, `u32` header length, UTF-8 JSON header,
//! then the tensor blob. The header carries a `tensors` array of
//! `{name, shape: [rows, cols], offset, bytes}` with offsets relative to the
//! start of the blob; every tensor is stored row-major as `f32`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nn::Mat;

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], format: &'static str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::format(
            format,
            format!("bad magic {:?}", String::from_utf8_lossy(&buf)),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub bytes: usize,
}

/// Writes a checkpoint. `header` must be a JSON object; a `tensors` table is
/// appended to it.
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    header: Value,
    tensors: &[(String, &Mat)],
) -> Result<()> {
    let mut header: Map<String, Value> = match header {
        Value::Object(m) => m,
        _ => return Err(Error::invalid("checkpoint header must be a JSON object")),
    };
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        let bytes = t.len() * 4;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.nrows(), t.ncols()],
            offset,
            bytes,
        });
        offset += bytes;
    }
    header.insert("tensors".into(), serde_json::to_value(&entries)?);
    let json = serde_json::to_vec(&Value::Object(header))?;
    w.write_all(magic)?;
    write_u32(w, json.len() as u32)?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        for i in 0..t.nrows() {
            write_f32s(w, t.row(i).iter().copied())?;
        }
    }
    Ok(())
}

/// A decoded checkpoint: the JSON header (minus the tensor table) and tensors by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: BTreeMap<String, Mat>,
}

impl Checkpoint {
    pub fn take(&mut self, name: &str, format: &'static str) -> Result<Mat> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::format(format, format!("missing tensor `{name}`")))
    }

    pub fn usize_field(&self, key: &str, format: &'static str) -> Result<usize> {
        self.header
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::format(format, format!("missing header field `{key}`")))
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R, magic: &[u8; 4], format: &'static str) -> Result<Checkpoint> {
    expect_magic(r, magic, format)?;
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let mut header: Value = serde_json::from_slice(&json)?;
    let entries: Vec<TensorEntry> = match header.as_object_mut().and_then(|m| m.remove("tensors")) {
        Some(v) => serde_json::from_value(v)?,
        None => return Err(Error::format(format, "header has no tensor table")),
    };
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut tensors = BTreeMap::new();
    for e in entries {
        let [rows, cols] = e.shape;
        if e.bytes != rows * cols * 4 || e.offset + e.bytes > blob.len() {
            return Err(Error::format(format, format!("tensor `{}` out of bounds", e.name)));
        }
        let values = read_f32s(&mut &blob[e.offset..e.offset + e.bytes], rows * cols)?;
        tensors.insert(e.name, Mat::from_row_slice(rows, cols, &values));
    }
    Ok(Checkpoint { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn checkpoint_roundtrip_preserves_f32_values() {
        let a = Mat::from_row_slice(2, 3, &[1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]);
        let b = Mat::from_row_slice(1, 2, &[0.5, -0.125]);
        let mut buf = Vec::new();
        write_checkpoint(
            &mut buf,
            b"TEST",
            json!({"k": 3}),
            &[("a".into(), &a), ("b".into(), &b)],
        )
        .unwrap();
        let mut ck = read_checkpoint(&mut buf.as_slice(), b"TEST", "TEST").unwrap();
        assert_eq!(ck.usize_field("k", "TEST").unwrap(), 3);
        let a2 = ck.take("a", "TEST").unwrap();
        assert!((a2 - &a).abs().max() < 1e-6);
        assert_eq!(ck.take("b", "TEST").unwrap(), b);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, b"AAAA", json!({}), &[]).unwrap();
        assert!(read_checkpoint(&mut buf.as_slice(), b"BBBB", "BBBB").is_err());
    }
}
