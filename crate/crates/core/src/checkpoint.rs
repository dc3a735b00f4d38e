//! `TGV1` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TGV1"
//! u64 manifest_len, manifest_len bytes of UTF-8 "key=value\n" lines
//! repeated until EOF:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank x u64 extents
//!   product(extents) x f64 (IEEE-754 bits, little-endian)
//! ```

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"TGV1";

/// Ordered `key=value` pairs stored ahead of the tensors.
pub type Manifest = Vec<(String, String)>;

pub fn encode(manifest: &[(String, String)], params: &ParamSet) -> Result<Vec<u8>> {
    let mut text = String::new();
    for (k, v) in manifest {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Format(format!("manifest entry `{k}` cannot be encoded")));
        }
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    let mut out = Vec::with_capacity(16 + text.len() + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &x in &e.shape {
            out.extend_from_slice(&(x as u64).to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, ParamSet)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected TGV1".into()));
    }
    let mlen = r.len()?;
    let text = std::str::from_utf8(r.take(mlen)?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut manifest = Vec::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line without `=`: {line}")))?;
        manifest.push((k.to_string(), v.to_string()));
    }
    let mut params = ParamSet::new();
    while r.pos < bytes.len() {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &x| acc.checked_mul(x))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(name, &shape, data);
    }
    Ok((manifest, params))
}

pub fn save(path: &Path, manifest: &[(String, String)], params: &ParamSet) -> Result<()> {
    let bytes = encode(manifest, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Manifest, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Flattens a JSON object into dotted `key=value` pairs; leaves are JSON text.
pub fn flatten_json(prefix: &str, value: &Value, out: &mut Manifest) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

/// Inverse of [`flatten_json`] for keys under `prefix`.
pub fn unflatten_json(prefix: &str, manifest: &[(String, String)]) -> Result<Value> {
    let mut root = Map::new();
    let lead = format!("{prefix}.");
    for (k, v) in manifest {
        let Some(rest) = k.strip_prefix(&lead) else { continue };
        let leaf: Value = serde_json::from_str(v)?;
        let parts: Vec<&str> = rest.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .ok_or_else(|| Error::Format(format!("manifest key `{k}` collides with a value")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), leaf);
    }
    Ok(Value::Object(root))
}
