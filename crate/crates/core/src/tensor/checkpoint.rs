//! The `IFSCKPT1` container: an ordered list of named `f32` tensors.
//!
//! Layout (all integers `u32` little-endian):
//!
//! ```text
//! "IFSCKPT1" count { name_len name rank extents[rank] f32_le[product(extents)] }*
//! ```
//!
//! Parameters are stored under their own name, with Adam state under
//! `<name>.adam_m`, `<name>.adam_v` and a rank-0 `<name>.step`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Parameter, Tensor};
use crate::bytes::Reader;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IFSCKPT1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Inserts or replaces an entry, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f32) {
        self.insert(name, Tensor::scalar(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        match self.get(name) {
            Some(t) if t.numel() == 1 => Ok(t.item()),
            Some(t) => Err(Error::format(name, format!("expected a scalar, found shape {:?}", t.shape()))),
            None => Err(Error::format(name, "missing entry")),
        }
    }

    /// Stores value and optimizer state of each parameter.
    pub fn add_parameters<'a>(&mut self, params: impl IntoIterator<Item = &'a Parameter<f32>>) {
        for p in params {
            self.insert(p.name.clone(), p.value.clone());
            self.insert(format!("{}.adam_m", p.name), p.adam_m.clone());
            self.insert(format!("{}.adam_v", p.name), p.adam_v.clone());
            self.insert_scalar(format!("{}.step", p.name), p.step_count as f32);
        }
    }

    /// Restores parameters saved by [`Checkpoint::add_parameters`], checking
    /// every shape against the receiving model.
    pub fn restore_parameters<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter<f32>>) -> Result<()> {
        for p in params {
            let fetch = |suffix: &str| -> Result<Tensor<f32>> {
                let key = format!("{}{suffix}", p.name);
                let t = self.get(&key).ok_or_else(|| Error::format(&key, "missing entry"))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::format(
                        &key,
                        format!("stored shape {:?} does not match model shape {:?}", t.shape(), p.value.shape()),
                    ));
                }
                Ok(t.clone())
            };
            let (value, m, v) = (fetch("")?, fetch(".adam_m")?, fetch(".adam_v")?);
            let step = self.scalar(&format!("{}.step", p.name))?;
            p.value = value;
            p.adam_m = m;
            p.adam_v = v;
            p.step_count = step as u64;
            p.zero_grad();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not an IFSCKPT1 checkpoint"));
        }
        let count = r.u32("count")?;
        let mut ckpt = Checkpoint::new();
        for i in 0..count {
            let name_len = r.u32(&format!("entry[{i}].name_length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("entry[{i}].name"))?)
                .map_err(|_| Error::format(format!("entry[{i}].name"), "not valid UTF-8"))?
                .to_string();
            let rank = r.u32(&format!("{name}.rank"))? as usize;
            if rank > 8 {
                return Err(Error::format(format!("{name}.rank"), format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&format!("{name}.extents"))? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = numel.ok_or_else(|| Error::format(format!("{name}.extents"), "extent product overflows"))?;
            let raw = r.take(numel.saturating_mul(4), &format!("{name}.data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if ckpt.index.contains_key(&name) {
                return Err(Error::format(name, "duplicate entry"));
            }
            ckpt.insert(name, Tensor::new(&shape, data)?);
        }
        r.finish()?;
        Ok(ckpt)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Load { path: path.to_path_buf(), source: Box::new(e) })
    }
}
