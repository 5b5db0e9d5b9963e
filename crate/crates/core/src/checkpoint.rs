//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "DLBL"  u32 version  str arch_tag  u32 n_tensors
//! n_tensors × { str name  u32 rank  u32 dims[rank]  f32 data[Π dims] }
//! u32 n_meta  n_meta × { str key  str value }
//! ```
//!
//! where `str` is a u32 byte length followed by UTF-8. Optimizer velocities
//! are stored as ordinary tensors under the `opt.velocity.` prefix. The
//! metadata trailer carries the epoch counter, seeds and the architecture
//! hyper-parameters needed to rebuild the network.

use std::collections::BTreeMap;
use std::path::Path;

use crate::arch::ArchSpec;
use crate::data::{ChannelRange, Preprocessing};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DLBL";
pub const VERSION: u32 = 1;
pub const VELOCITY_PREFIX: &str = "opt.velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: BTreeMap<String, String>,
}

/// Outcome of a partial load.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WarmStartReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

impl Checkpoint {
    pub fn new(arch: impl Into<String>) -> Self {
        Checkpoint {
            arch: arch.into(),
            tensors: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    /// Snapshot of every parameter and buffer of `net`.
    pub fn from_network(arch: impl Into<String>, net: &Network<f32>) -> Self {
        let mut ck = Checkpoint::new(arch);
        ck.tensors = net
            .state()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        ck
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name, t)),
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata `{key}` = `{raw}`")))
    }

    pub fn store_spec(&mut self, spec: &ArchSpec) {
        self.set_meta("arch.in_channels", spec.in_channels);
        self.set_meta("arch.classes", spec.classes);
        self.set_meta("arch.patch", spec.patch);
        self.set_meta("arch.width_divisor", spec.width_divisor);
        self.set_meta("arch.dropout", spec.dropout);
        self.set_meta("arch.tau", spec.tau);
        self.set_meta("arch.dropout_before_pool", spec.dropout_before_pool);
    }

    pub fn spec(&self) -> Result<ArchSpec> {
        let mut spec = ArchSpec::new(&self.arch, self.meta_parse("arch.in_channels")?, self.meta_parse("arch.classes")?);
        spec.patch = self.meta_parse("arch.patch")?;
        spec.width_divisor = self.meta_parse("arch.width_divisor")?;
        spec.dropout = self.meta_parse("arch.dropout")?;
        spec.tau = self.meta_parse("arch.tau")?;
        spec.dropout_before_pool = self.meta_parse("arch.dropout_before_pool")?;
        Ok(spec)
    }

    /// Rebuilds the network and loads every tensor.
    pub fn network(&self) -> Result<(ArchSpec, Network<f32>)> {
        let spec = self.spec()?;
        let mut net = spec.build()?;
        self.apply(&self.arch, &mut net)?;
        Ok((spec, net))
    }

    pub fn store_preprocessing(&mut self, pre: &Preprocessing) {
        let mean: Vec<String> = pre.mean.iter().map(f32::to_string).collect();
        self.set_meta("data.mean", mean.join(","));
        if let Some(c) = pre.height_channel {
            self.set_meta("data.height_channel", c);
        }
        if let Some(r) = pre.height_range {
            self.set_meta("norm.height.min", r.min);
            self.set_meta("norm.height.max", r.max);
        }
    }

    pub fn preprocessing(&self) -> Result<Preprocessing> {
        let raw = self.meta.get("data.mean").ok_or_else(|| Error::Checkpoint("missing metadata `data.mean`".into()))?;
        let mean = raw
            .split(',')
            .map(|v| v.trim().parse::<f32>().map_err(|_| Error::Checkpoint(format!("bad mean `{raw}`"))))
            .collect::<Result<Vec<f32>>>()?;
        let height_channel = self.meta.contains_key("data.height_channel").then(|| self.meta_parse("data.height_channel")).transpose()?;
        let height_range = match (self.meta.contains_key("norm.height.min"), self.meta.contains_key("norm.height.max")) {
            (true, true) => Some(ChannelRange { min: self.meta_parse("norm.height.min")?, max: self.meta_parse("norm.height.max")? }),
            _ => None,
        };
        Ok(Preprocessing { mean, height_channel, height_range })
    }

    /// Tensors that are optimizer state, keyed by parameter name.
    pub fn velocities(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(VELOCITY_PREFIX).map(|p| (p, t)))
    }

    /// Copies every network tensor from the checkpoint. All names must be
    /// present with identical shapes and the tag must match.
    pub fn apply(&self, arch: &str, net: &mut Network<f32>) -> Result<()> {
        if self.arch != arch {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds architecture `{}`, expected `{arch}`",
                self.arch
            )));
        }
        for (name, dst) in net.state_mut() {
            let src = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: checkpoint {} vs network {}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.arch);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, 4);
            for d in t.shape().dims() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let mut ck = Checkpoint::new(r.string()?);
        let n = r.u32()?;
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
            }
            let mut dims = [1usize; 4];
            for d in dims[4 - rank..].iter_mut() {
                *d = r.u32()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            if shape.len() == 0 {
                return Err(Error::Checkpoint(format!("tensor `{name}` is empty")));
            }
            let raw = r.take(shape.len() * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        let m = r.u32()?;
        for _ in 0..m {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Copies tensors from `ck` into `net` through a prefix map of
/// `(network prefix, checkpoint prefix)` pairs. A network tensor is loaded
/// when some network prefix matches it and the mapped checkpoint tensor
/// exists with the same shape; everything else keeps its current value.
pub fn warm_start(net: &mut Network<f32>, ck: &Checkpoint, map: &[(String, String)]) -> WarmStartReport {
    let mut report = WarmStartReport::default();
    for (name, dst) in net.state_mut() {
        let src = map.iter().find_map(|(to, from)| {
            name.strip_prefix(to.as_str())
                .and_then(|rest| ck.get(&format!("{from}{rest}")))
        });
        match src {
            Some(src) if src.shape() == dst.shape() => {
                dst.data_mut().copy_from_slice(src.data());
                report.loaded.push(name);
            }
            _ => report.skipped.push(name),
        }
    }
    report
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}
