//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DDFX" | u32 version
//! u64 len | config JSON
//! u64 len | category tables JSON
//! u64 groups
//!   per group:  u64 len | name | u64 params
//!     per param: u64 len | name | u64 ndim | ndim × u64 | u64 n | n × f64
//! ```
//!
//! Groups and parameters appear in name order, so equal models give equal
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::Config;
use crate::diffusion::Model;
use crate::error::{Error, Result};
use crate::nn::{group_of, ParamStore};
use crate::scene::CategoryTables;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DDFX";
pub const VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut out, serde_json::to_string(&model.config).expect("config serializes").as_bytes());
    put_bytes(&mut out, serde_json::to_string(&model.tables).expect("tables serialize").as_bytes());
    let mut groups: BTreeMap<&str, Vec<(&String, &Tensor)>> = BTreeMap::new();
    for (name, t) in model.params.iter() {
        groups.entry(group_of(name)).or_default().push((name, t));
    }
    put_u64(&mut out, groups.len() as u64);
    for (group, params) in groups {
        put_bytes(&mut out, group.as_bytes());
        put_u64(&mut out, params.len() as u64);
        for (name, t) in params {
            put_bytes(&mut out, name.as_bytes());
            put_u64(&mut out, t.ndim() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_u64(&mut out, t.len() as u64);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str, unit: usize) -> Result<usize> {
        let n = self.u64(what)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > remaining) {
            return Err(corrupt(format!("{what} length {n} exceeds the remaining {remaining} bytes")));
        }
        Ok(n as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what, 1)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| corrupt(format!("{what} is not UTF-8")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Model> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic (not a checkpoint file)"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version} (expected {VERSION})")));
    }
    let config: Config =
        serde_json::from_str(&r.string("config")?).map_err(|e| corrupt(format!("config: {e}")))?;
    config.validate()?;
    let tables: CategoryTables =
        serde_json::from_str(&r.string("category tables")?).map_err(|e| corrupt(format!("category tables: {e}")))?;
    tables.validate()?;
    let mut params = ParamStore::new();
    let groups = r.len("group count", 16)?;
    for _ in 0..groups {
        let group = r.string("group name")?;
        let count = r.len("parameter count", 24)?;
        for _ in 0..count {
            let name = r.string("parameter name")?;
            if group_of(&name) != group {
                return Err(corrupt(format!("parameter `{name}` filed under group `{group}`")));
            }
            let ndim = r.len("rank", 8)?;
            let shape = (0..ndim)
                .map(|_| r.u64("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = r.len("data", 8)?;
            if shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) != Some(n) {
                return Err(corrupt(format!("`{name}`: shape {shape:?} does not hold {n} values")));
            }
            let raw = r.take(n * 8, "data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if params.contains(&name) {
                return Err(corrupt(format!("duplicate parameter `{name}`")));
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
    }
    if r.pos != buf.len() {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Model { config, tables, params })
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
