//! The `LFL1` tensor container.
//!
//! Layout: the 4-byte magic `LFL1`, then records until end of file. Each
//! record is `name_len: u64`, `name: [u8; name_len]` (UTF-8), `rank: u64`,
//! `extents: [u64; rank]`, `data: [f64; product(extents)]`, all little-endian.
//!
//! Records whose name starts with `@` carry metadata as `@key=value` with a
//! single scalar payload of 0.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LFL1";
const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 16;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.records.push((name.into(), t));
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (k, v) in params.iter() {
            self.push(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.records.retain(|(n, _)| meta_split(n).map(|(k, _)| k) != Some(key));
        self.records.push((format!("@{key}={value}"), Tensor::scalar(0.0)));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.records
            .iter()
            .filter_map(|(n, _)| meta_split(n))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Container(format!("missing metadata `{key}`")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor `{name}`")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn params(&self, prefix: &str) -> ParamSet {
        self.records
            .iter()
            .filter(|(n, _)| !n.starts_with('@'))
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|k| (k.to_string(), t.clone())))
            .collect()
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Container("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let mut records = Vec::new();
        while !r.is_empty() {
            let name_len = read_u64(&mut r)?;
            if name_len > MAX_NAME {
                return Err(Error::Container(format!("name length {name_len} too large")));
            }
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name)
                .map_err(|_| Error::Container("truncated name".into()))?;
            let name = String::from_utf8(name).map_err(|_| Error::Container("name is not UTF-8".into()))?;
            let rank = read_u64(&mut r)?;
            if rank > MAX_RANK {
                return Err(Error::Container(format!("rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut count: u64 = 1;
            for _ in 0..rank {
                let e = read_u64(&mut r)?;
                count = count
                    .checked_mul(e)
                    .ok_or_else(|| Error::Container("extent overflow".into()))?;
                shape.push(e as usize);
            }
            if count.saturating_mul(8) > r.len() as u64 {
                return Err(Error::Container(format!("truncated data for `{name}`")));
            }
            let mut data = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).expect("length checked");
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Container(e.to_string()))?;
            records.push((name, t));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

fn meta_split(name: &str) -> Option<(&str, &str)> {
    name.strip_prefix('@')?.split_once('=')
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Container("truncated record".into()))?;
    Ok(u64::from_le_bytes(b))
}
