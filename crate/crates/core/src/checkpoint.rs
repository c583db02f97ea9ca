//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes   b"FTYPECKP"
//! format_version   u32
//! manifest_len     u64
//! manifest         manifest_len bytes of UTF-8 text
//! payload          parameter arrays, back to back, in manifest order
//! ```
//!
//! Manifest lines are either `meta <key> <json>` or
//! `param <name> <f32|f64> <d0>x<d1>... <offset> <nbytes>`, where `offset`
//! counts from the start of the payload. Arrays are IEEE-754 little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FTYPECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, Value>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: Value) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Data(format!("checkpoint has no string field {key}")))
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            check_token(k)?;
            manifest.push_str(&format!("meta {k} {}\n", serde_json::to_string(v).expect("json")));
        }
        let mut payload = Vec::new();
        for (name, entry) in self.params.iter() {
            check_token(name)?;
            let shape: Vec<String> = entry.value.shape().iter().map(usize::to_string).collect();
            let offset = payload.len();
            for &x in entry.value.data() {
                match dtype {
                    DType::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
                    DType::F64 => payload.extend_from_slice(&x.to_le_bytes()),
                }
            }
            manifest.push_str(&format!(
                "param {name} {} {} {offset} {}\n",
                dtype.as_str(),
                shape.join("x"),
                payload.len() - offset
            ));
        }
        let mut out = Vec::with_capacity(20 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("corrupt checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let manifest = bytes
            .get(20..20 + mlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[20 + mlen..];

        let mut ckpt = Checkpoint::default();
        for line in manifest.lines() {
            let mut it = line.splitn(3, ' ');
            match (it.next(), it.next(), it.next()) {
                (Some("meta"), Some(key), Some(json)) => {
                    let v = serde_json::from_str(json).map_err(|e| bad(&e.to_string()))?;
                    ckpt.meta.insert(key.to_string(), v);
                }
                (Some("param"), Some(name), Some(rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [dtype, shape, offset, nbytes] = f[..] else {
                        return Err(bad(line));
                    };
                    let dtype = match dtype {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        other => return Err(bad(&format!("unknown dtype {other}"))),
                    };
                    let shape: Vec<usize> = shape
                        .split('x')
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(line))?;
                    let offset: usize = offset.parse().map_err(|_| bad(line))?;
                    let nbytes: usize = nbytes.parse().map_err(|_| bad(line))?;
                    let raw = payload
                        .get(offset..offset + nbytes)
                        .ok_or_else(|| bad("truncated payload"))?;
                    let data: Vec<f64> = raw
                        .chunks_exact(dtype.width())
                        .map(|c| match dtype {
                            DType::F32 => f32::from_le_bytes(c.try_into().expect("4")) as f64,
                            DType::F64 => f64::from_le_bytes(c.try_into().expect("8")),
                        })
                        .collect();
                    ckpt.params.insert(name, Tensor::new(shape, data)?)?;
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Data(format!("checkpoint key {s:?} must be non-empty without whitespace")));
    }
    Ok(())
}
