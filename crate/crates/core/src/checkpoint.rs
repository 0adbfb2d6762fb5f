//! Binary tensor files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "ODIG" | version | config length | config (UTF-8 `key = value` lines)
//! tensor count | per tensor: name length | name | rank | dims... | f32 data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Param;

pub const MAGIC: &[u8; 4] = b"ODIG";
pub const FORMAT_VERSION: u32 = 1;

/// A named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn from_param(name: impl Into<String>, p: &Param<f32>) -> Self {
        Self { name: name.into(), shape: p.shape.clone(), data: p.data.clone() }
    }
}

/// Config block plus tensors, in file order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TensorFile {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<StoredTensor>,
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| crate::error::invalid(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(file: &TensorFile) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut config = String::new();
    for (k, v) in &file.config {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(crate::error::invalid(format!("config entry `{k}` cannot be stored")));
        }
        config.push_str(&format!("{k} = {v}\n"));
    }
    push_u32(&mut buf, config.len())?;
    buf.extend_from_slice(config.as_bytes());
    push_u32(&mut buf, file.tensors.len())?;
    for t in &file.tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(crate::error::invalid(format!("tensor {} has inconsistent shape", t.name)));
        }
        push_u32(&mut buf, t.name.len())?;
        buf.extend_from_slice(t.name.as_bytes());
        push_u32(&mut buf, t.shape.len())?;
        for d in &t.shape {
            push_u32(&mut buf, *d)?;
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, detail: detail.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("unexpected end of file reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn text(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let start = self.pos;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|_| Error::Format { offset: start, detail: format!("{what} is not UTF-8") })
    }
}

pub fn decode(buf: &[u8]) -> Result<TensorFile> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, detail: "missing ODIG magic".into() });
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let len = r.u32("config length")?;
    let start = r.pos;
    let mut config = BTreeMap::new();
    for line in r.text(len, "config block")?.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Format { offset: start, detail: format!("bad config line `{line}`") })?;
        config.insert(k.to_string(), v.to_string());
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")?;
        let name = r.text(n, "tensor name")?.to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let bytes = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| r.fail("tensor too large"))?;
        let raw = r.take(bytes, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push(StoredTensor { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok(TensorFile { config, tensors })
}

pub fn save(path: impl AsRef<Path>, file: &TensorFile) -> Result<()> {
    fs::write(path, encode(file)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

impl TensorFile {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format { offset: 0, detail: format!("config key `{key}` missing") })
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::Format { offset: 0, detail: format!("config key `{key}` has bad value `{v}`") })
    }

    /// Copies stored tensors into `params` by name. Every parameter must be
    /// present with a matching shape.
    pub fn restore(&self, prefix: &str, names: &[String], params: Vec<&mut Param<f32>>) -> Result<()> {
        let by_name: BTreeMap<&str, &StoredTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, p) in names.iter().zip(params) {
            let full = format!("{prefix}{name}");
            let t = by_name
                .get(full.as_str())
                .ok_or_else(|| Error::Format { offset: 0, detail: format!("tensor `{full}` missing") })?;
            if t.shape != p.shape {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("tensor `{full}` has shape {:?}, expected {:?}", t.shape, p.shape),
                });
            }
            p.data.copy_from_slice(&t.data);
        }
        Ok(())
    }
}
