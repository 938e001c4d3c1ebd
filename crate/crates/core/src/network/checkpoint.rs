//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "FPLNETCK"
//! version  u32      1
//! config   u32 length + UTF-8 `key = value` text of the NetworkConfig
//! count    u32
//! entries  count x { u32 name length, name, u8 dtype (0 = f32, 1 = f64), 4 x u32 dims }
//! payload  tensors in entry order, raw little-endian elements
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::config::NetworkConfig;
use crate::network::model::Network;
use crate::tensor::{DType, Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"FPLNETCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Shape,
    /// Values widened to f64; widening f32 is exact.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub entries: Vec<Entry>,
}

/// How many parameters [`Network::load_matching`] copied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchReport {
    pub copied: usize,
    /// Network parameters with no same-name, same-shape entry.
    pub kept: Vec<String>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &Network<T>) -> Self {
        let entries = net
            .store()
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                dtype: T::DTYPE,
                shape: p.value.shape(),
                values: p.value.data().iter().map(|v| v.to_f64().expect("finite cast")).collect(),
            })
            .collect();
        Checkpoint {
            config: net.config().clone(),
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            for d in e.shape.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for e in &self.entries {
            for &v in &e.values {
                match e.dtype {
                    DType::F32 => (v as f32).write_le(&mut out),
                    DType::F64 => v.write_le(&mut out),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (this build reads version {VERSION})"
            )));
        }
        let config = NetworkConfig::from_text(&r.string("config")?)?;
        let count = r.u32("entry count")? as usize;
        let mut header = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name = r.string("entry name")?;
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("entry {i} ({name}) has unknown dtype tag {tag}")))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("shape")? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            shape
                .validate()
                .map_err(|e| Error::Checkpoint(format!("entry {name}: {e}")))?;
            header.push((name, dtype, shape));
        }
        let mut entries = Vec::with_capacity(header.len());
        for (name, dtype, shape) in header {
            let size = dtype.size_of();
            let raw = r.take(shape.numel() * size, &format!("payload of {name}"))?;
            let values = raw
                .chunks_exact(size)
                .map(|c| match dtype {
                    DType::F32 => f32::read_le(c) as f64,
                    DType::F64 => f64::read_le(c),
                })
                .collect();
            entries.push(Entry {
                name,
                dtype,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    fn find(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    Checkpoint::from_network(net).write(path)
}

/// Rebuilds the stored network and fills every parameter from the file.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let ck = Checkpoint::read(path)?;
    let mut net = Network::<T>::new(ck.config.clone())?;
    let ids: Vec<_> = net.store().ids().collect();
    for id in ids {
        let p = net.store().get(id);
        let e = ck
            .find(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("no entry for parameter {}", p.name)))?;
        if e.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {} in the file but {} in the network",
                p.name,
                e.shape,
                p.value.shape()
            )));
        }
        let t = Tensor::from_vec(e.shape, e.values.iter().map(|&v| T::cst(v)).collect())?;
        *net.store_mut().value_mut(id) = t;
    }
    Ok(net)
}

impl<T: Scalar> Network<T> {
    /// Copies every entry whose name and shape match a parameter of this
    /// network; the rest keep their current values. The file is fully
    /// parsed before anything is copied.
    pub fn load_matching(&mut self, path: &Path) -> Result<MatchReport> {
        let ck = Checkpoint::read(path)?;
        Ok(self.load_matching_from(&ck))
    }

    pub fn load_matching_from(&mut self, ck: &Checkpoint) -> MatchReport {
        let mut report = MatchReport {
            copied: 0,
            kept: Vec::new(),
        };
        let ids: Vec<_> = self.store().ids().collect();
        for id in ids {
            let p = self.store().get(id);
            match ck.find(&p.name).filter(|e| e.shape == p.value.shape()) {
                Some(e) => {
                    let data: Vec<T> = e.values.iter().map(|&v| T::cst(v)).collect();
                    self.store_mut().value_mut(id).data_mut().copy_from_slice(&data);
                    report.copied += 1;
                }
                None => report.kept.push(p.name.clone()),
            }
        }
        report
    }
}
