//! `MPTC1` artifact container and the one-line-header prompt file format.
//!
//! Container layout:
//!
//! ```text
//! b"MPTC1"
//! u32 LE  config byte length, then UTF-8 `key=value\n` lines
//! u32 LE  tensor count
//! repeated: u32 LE name length, UTF-8 name, NDT1 tensor
//! u64 LE  FNV-1a over every (name, NDT1) pair in order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndtensor::{peek_dtype, Float, Tensor};
use crate::seeds::{fnv1a64_update, FNV_OFFSET};

pub const CONTAINER_MAGIC: &[u8; 5] = b"MPTC1";

/// Ordered `key=value` configuration lines.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvLines(pub Vec<(String, String)>);

impl KvLines {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(format!("missing config key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::format(format!("bad value for {key}: {raw:?}")))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            out.push((k.to_string(), v.to_string()));
        }
        Ok(KvLines(out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: KvLines,
    /// Name → raw NDT1 blob, kept encoded so any dtype round-trips untouched.
    pub tensors: Vec<(String, Vec<u8>)>,
}

pub fn content_hash_of<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> u64 {
    let mut h = FNV_OFFSET;
    for (name, blob) in tensors {
        h = fnv1a64_update(h, name.as_bytes());
        h = fnv1a64_update(h, blob);
    }
    h
}

impl Container {
    pub fn new(config: KvLines) -> Self {
        Container {
            config,
            tensors: Vec::new(),
        }
    }

    pub fn add<E: Float>(&mut self, name: &str, t: &Tensor<E>) {
        self.tensors.push((name.to_string(), t.to_bytes()));
    }

    pub fn tensor<E: Float>(&self, name: &str) -> Result<Tensor<E>> {
        let blob = self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::format(format!("missing tensor {name:?}")))?;
        Tensor::from_bytes(blob)
    }

    pub fn dtype(&self) -> Result<u8> {
        match self.tensors.first() {
            Some((_, b)) => peek_dtype(b),
            None => Ok(4),
        }
    }

    pub fn content_hash(&self) -> u64 {
        content_hash_of(self.tensors.iter().map(|(n, b)| (n.as_str(), b.as_slice())))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        let cfg = self.config.render();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, blob) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(blob);
        }
        out.extend_from_slice(&self.content_hash().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != CONTAINER_MAGIC {
            return Err(Error::format("missing MPTC1 magic"));
        }
        let cfg_len = r.u32()? as usize;
        let cfg =
            std::str::from_utf8(r.take(cfg_len)?).map_err(|e| Error::format(e.to_string()))?;
        let config = KvLines::parse_text(cfg)?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::format(e.to_string()))?
                .to_string();
            let start = r.pos;
            let blob_len = ndt_len(&bytes[start..])?;
            tensors.push((name, r.take(blob_len)?.to_vec()));
        }
        let stored = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after container hash"));
        }
        let c = Container { config, tensors };
        if c.content_hash() != stored {
            return Err(Error::format(format!(
                "content hash mismatch: stored {stored:016x}, computed {:016x}",
                c.content_hash()
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::from_bytes(&fs::read(path)?)
    }
}

fn ndt_len(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 6 || &bytes[..4] != b"NDT1" {
        return Err(Error::format("expected NDT1 tensor"));
    }
    let width = bytes[4] as usize;
    let rank = bytes[5] as usize;
    if bytes.len() < 6 + 8 * rank {
        return Err(Error::format("truncated NDT1 header"));
    }
    let mut n = 1usize;
    for i in 0..rank {
        let d =
            u64::from_le_bytes(bytes[6 + 8 * i..14 + 8 * i].try_into().expect("8 bytes")) as usize;
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::format("NDT1 dims overflow"))?;
    }
    Ok(6 + 8 * rank + n * width)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Writes via a sibling temp file and rename so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Prompt-family file: a one-line header of space-separated `key=value`
/// fields, a newline, then the tensors back to back in NDT1 format.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptFile<E: Float = f32> {
    pub header: BTreeMap<String, String>,
    pub header_order: Vec<String>,
    pub tensors: Vec<Tensor<E>>,
}

impl<E: Float> PromptFile<E> {
    pub fn new(fields: &[(&str, String)], tensors: Vec<Tensor<E>>) -> Self {
        PromptFile {
            header: fields
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            header_order: fields.iter().map(|(k, _)| k.to_string()).collect(),
            tensors,
        }
    }

    pub fn field(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("prompt header lacks {key:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let line = self
            .header_order
            .iter()
            .map(|k| format!("{k}={}", self.header[k]))
            .collect::<Vec<_>>()
            .join(" ");
        let mut out = line.into_bytes();
        out.push(b'\n');
        for t in &self.tensors {
            out.extend_from_slice(&t.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("prompt file lacks header line"))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::format(e.to_string()))?;
        let mut header = BTreeMap::new();
        let mut header_order = Vec::new();
        for field in line.split(' ') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad header field {field:?}")))?;
            header.insert(k.to_string(), v.to_string());
            header_order.push(k.to_string());
        }
        let mut rest = &bytes[nl + 1..];
        let mut tensors = Vec::new();
        while !rest.is_empty() {
            let len = ndt_len(rest)?;
            if len > rest.len() {
                return Err(Error::format("truncated tensor in prompt file"));
            }
            tensors.push(Tensor::from_bytes(&rest[..len])?);
            rest = &rest[len..];
        }
        Ok(PromptFile {
            header,
            header_order,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        PromptFile::from_bytes(&fs::read(path)?)
    }
}
