//! Single-file checkpoints.
//!
//! Layout (little-endian): magic, `u32` version, `u32` metadata length,
//! metadata JSON, `u32` array count, then per array `u32` name length, name,
//! `u32` rank, `u64` dims, `f32` values. Arrays live in the `base/`,
//! `adapter/`, `label/` and `projector/` namespaces.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"DYSFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: FusionConfig,
    vocab: Vec<String>,
    label_start: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(model: &FusionModel<f32>) -> Result<Vec<u8>> {
    let meta = Meta {
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        label_start: model.vocab.label_start(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| bad(format!("encoding metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let mut arrays = Vec::new();
    model.visit_all(&mut |name, shape, values| arrays.push((name.to_string(), shape.to_vec(), values.to_vec())));
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, shape, values) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Ignore stored adapters and keep the freshly initialised ones.
    pub base_only: bool,
}

pub fn from_bytes(bytes: &[u8], options: LoadOptions) -> Result<FusionModel<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("format version {version} is not supported (expected {VERSION})")));
    }
    let meta_len = c.u32()? as usize;
    let meta: Meta = serde_json::from_slice(c.take(meta_len)?).map_err(|e| bad(format!("metadata: {e}")))?;
    let vocab = Vocab::from_tokens(meta.vocab, meta.label_start)?;
    let mut model = FusionModel::<f32>::new(meta.config, vocab)?;

    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    let count = c.u32()?;
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|_| bad("array name is not UTF-8"))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| bad("array too large"))?)?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        if arrays.insert(name.clone(), (shape, values)).is_some() {
            return Err(bad(format!("array {name} appears twice")));
        }
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes after the last array"));
    }

    let mut expected = BTreeMap::new();
    model.visit_all(&mut |name, shape, _| {
        expected.insert(name.to_string(), shape.to_vec());
    });
    let mut problems = Vec::new();
    for (name, (shape, _)) in &arrays {
        match expected.get(name) {
            None => problems.push(format!("unexpected array {name}")),
            Some(s) if s != shape => problems.push(format!("{name} has shape {shape:?}, expected {s:?}")),
            _ => {}
        }
    }
    for name in expected.keys() {
        let optional = name.starts_with("adapter/");
        if !arrays.contains_key(name) && !optional {
            problems.push(format!("missing array {name}"));
        }
    }
    if !problems.is_empty() {
        return Err(bad(problems.join("; ")));
    }
    model.visit_all_mut(&mut |name, values| {
        if options.base_only && name.starts_with("adapter/") {
            return;
        }
        if let Some((_, stored)) = arrays.get(name) {
            values.copy_from_slice(stored);
        }
    });
    Ok(model)
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(format!("creating temp file in {}", dir.display()), e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(format!("renaming into {}", path.display()), e.error))?;
    Ok(())
}

pub fn save(model: &FusionModel<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<FusionModel<f32>> {
    load_with(path, LoadOptions::default())
}

pub fn load_with(path: &Path, options: LoadOptions) -> Result<FusionModel<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes, options)
}
