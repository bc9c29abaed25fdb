//! Binary container for model state and datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ANOM" | u32 version | [u8; 32] config sha-256 | u32 entry count
//! entry*: u16 name len | name | u8 dtype | u8 ndim | u64 dim* | u64 offset | u64 byte len
//! payload bytes (offsets are relative to the payload start)
//! u32 crc32 of every preceding byte
//! ```

use std::path::Path;

use anomem_autodiff::Tensor;

use crate::config::ExperimentConfig;
use crate::data::LabeledImageSet;
use crate::detect::ScaleHead;
use crate::encoder::EncoderState;
use crate::error::{invalid, Error, Result};
use crate::memory::HopfieldMemory;

pub const MAGIC: &[u8; 4] = b"ANOM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U8(_) => 1,
            Payload::U32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Payload::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::U8(v) => v.clone(),
            Payload::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub config_hash: [u8; 32],
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated: wanted {n} bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) {
        self.entries.push(Entry {
            name: name.into(),
            shape,
            payload,
        });
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push(name, t.shape().to_vec(), Payload::F64(t.data().to_vec()));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        let mut payloads = Vec::new();
        for e in &self.entries {
            if e.shape.iter().product::<usize>() != e.payload.len() {
                return Err(invalid(format!("entry {} shape does not match its payload", e.name)));
            }
            if let Payload::F64(v) = &e.payload {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(invalid(format!("entry {} holds non-finite values", e.name)));
                }
            }
            let name = e.name.as_bytes();
            if name.len() > u16::MAX as usize || e.shape.len() > u8::MAX as usize {
                return Err(invalid(format!("entry {} name or rank too large", e.name)));
            }
            let bytes = e.payload.bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.payload.dtype());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            offset += bytes.len() as u64;
            payloads.push(bytes);
        }
        for p in payloads {
            out.extend_from_slice(&p);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 + 4 + 32 + 4 + 4 {
            return Err(Error::Format {
                offset: buf.len(),
                msg: "file too short for a container".into(),
            });
        }
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format {
                offset: at + 2,
                msg: "entry name is not utf-8".into(),
            })?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let off = r.u64()? as usize;
            let len = r.u64()? as usize;
            table.push((at, name, dtype, shape, off, len));
        }
        let payload_start = r.pos;
        let payload = &body[payload_start..];
        let mut entries = Vec::with_capacity(table.len());
        for (at, name, dtype, shape, off, len) in table {
            let end = off.checked_add(len).filter(|&e| e <= payload.len()).ok_or_else(|| Error::Format {
                offset: payload_start + off.min(payload.len()),
                msg: format!("entry {name} payload out of bounds"),
            })?;
            let bytes = &payload[off..end];
            let numel: usize = shape.iter().product();
            let (width, p) = match dtype {
                0 => (8, Payload::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())),
                1 => (1, Payload::U8(bytes.to_vec())),
                2 => (4, Payload::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())),
                other => {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("entry {name} has unknown dtype {other}"),
                    })
                }
            };
            if numel * width != len {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("entry {name} shape {shape:?} does not match {len} bytes"),
                });
            }
            entries.push(Entry {
                name,
                shape,
                payload: p,
            });
        }
        let actual = crc32fast::hash(body);
        if actual != stored {
            return Err(Error::Format {
                offset: body.len(),
                msg: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        Ok(Self {
            config_hash,
            entries,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| invalid(format!("container has no entry {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.require(name)?;
        match &e.payload {
            Payload::F64(v) => Ok(Tensor::new(e.shape.clone(), v.clone())?),
            _ => Err(invalid(format!("entry {name} is not f64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.require(name)?.payload {
            Payload::U8(v) => Ok(v),
            _ => Err(invalid(format!("entry {name} is not u8"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match &self.require(name)?.payload {
            Payload::U32(v) => Ok(v),
            _ => Err(invalid(format!("entry {name} is not u32"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Trained model state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub encoder: EncoderState,
    /// One slot per encoder scale.
    pub memories: Vec<Option<HopfieldMemory>>,
    /// One slot per encoder scale; empty after stage 1.
    pub heads: Vec<Option<ScaleHead>>,
    /// Stage-1 optimizer velocities, in parameter order.
    pub velocity: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container {
            config_hash: self.config.hash(),
            entries: Vec::new(),
        };
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        c.push("config.json", vec![json.len()], Payload::U8(json));
        for (i, k) in self.encoder.kernels.iter().enumerate() {
            c.push_tensor(format!("encoder.kernel.{i}"), k);
        }
        for (i, b) in self.encoder.biases.iter().enumerate() {
            c.push_tensor(format!("encoder.bias.{i}"), b);
        }
        for (s, m) in self.memories.iter().enumerate() {
            if let Some(m) = m {
                c.push_tensor(format!("memory.{s}"), m.weights());
            }
        }
        for (s, h) in self.heads.iter().enumerate() {
            if let Some(h) = h {
                for (part, t) in ["w1", "b1", "w2", "b2"].iter().zip(h.params()) {
                    c.push_tensor(format!("head.{s}.{part}"), t);
                }
                c.push_tensor(format!("head.{s}.in_mean"), &h.in_mean);
                c.push_tensor(format!("head.{s}.in_std"), &h.in_std);
            }
        }
        for (i, v) in self.velocity.iter().enumerate() {
            c.push_tensor(format!("optim.velocity.{i}"), v);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_slice(c.bytes("config.json")?)?;
        config.validate()?;
        if config.hash() != c.config_hash {
            return Err(Error::Format {
                offset: 8,
                msg: "header hash does not match the embedded config".into(),
            });
        }
        let spec = config.encoder.clone();
        let blocks: usize = spec.stages.iter().map(|s| s.widths.len()).sum();
        let kernels = (0..blocks)
            .map(|i| c.tensor(&format!("encoder.kernel.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let biases = (0..blocks)
            .map(|i| c.tensor(&format!("encoder.bias.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let mut c_in = spec.channels;
        let mut bi = 0;
        for st in &spec.stages {
            for &w in &st.widths {
                if kernels[bi].shape() != [3, 3, c_in, w] || biases[bi].shape() != [w] {
                    return Err(invalid(format!("encoder block {bi} has the wrong shape")));
                }
                c_in = w;
                bi += 1;
            }
        }
        let encoder = EncoderState {
            spec,
            kernels,
            biases,
        };
        let n = config.num_scales();
        let m = &config.memory;
        let mut memories = Vec::with_capacity(n);
        let mut heads = Vec::with_capacity(n);
        for s in 0..n {
            memories.push(match c.get(&format!("memory.{s}")) {
                Some(_) => Some(HopfieldMemory::new(
                    c.tensor(&format!("memory.{s}"))?,
                    m.beta,
                    m.tol,
                    m.max_iters,
                )?),
                None => None,
            });
            heads.push(match c.get(&format!("head.{s}.w1")) {
                Some(_) => {
                    let w1 = c.tensor(&format!("head.{s}.w1"))?;
                    let channels = encoder.spec.scale_shapes()[s].2;
                    let grid2 = w1.shape()[0] / channels;
                    let grid = (grid2 as f64).sqrt().round() as usize;
                    if grid * grid * channels != w1.shape()[0] {
                        return Err(invalid(format!("head {s} input width does not fit scale")));
                    }
                    let in_mean = c.tensor(&format!("head.{s}.in_mean"))?;
                    let in_std = c.tensor(&format!("head.{s}.in_std"))?;
                    let fan = [w1.shape()[0]];
                    if in_mean.shape() != fan || in_std.shape() != fan || in_std.data().iter().any(|&v| !(v > 0.0)) {
                        return Err(invalid(format!("head {s} input standardization is malformed")));
                    }
                    Some(ScaleHead {
                        grid,
                        in_mean,
                        in_std,
                        w1,
                        b1: c.tensor(&format!("head.{s}.b1"))?,
                        w2: c.tensor(&format!("head.{s}.w2"))?,
                        b2: c.tensor(&format!("head.{s}.b2"))?,
                    })
                }
                None => None,
            });
        }
        let mut velocity = Vec::new();
        while c.get(&format!("optim.velocity.{}", velocity.len())).is_some() {
            velocity.push(c.tensor(&format!("optim.velocity.{}", velocity.len()))?);
        }
        Ok(Self {
            config,
            encoder,
            memories,
            heads,
            velocity,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Loads and compares the stored config hash against `current`. A
    /// mismatch is logged and reported, never fatal.
    pub fn load_checked(path: impl AsRef<Path>, current: &ExperimentConfig) -> Result<(Self, bool)> {
        let ck = Self::load(path)?;
        let mismatch = ck.config.hash() != current.hash();
        if mismatch {
            log::warn!("checkpoint was written under a different config; continuing with the stored one");
        }
        Ok((ck, mismatch))
    }

    /// Scale weights used for fusion and training.
    pub fn scale_weights(&self) -> Vec<f64> {
        self.config.scale_weights()
    }
}

/// Writes an image set in the container format.
pub fn dataset_to_container(set: &LabeledImageSet) -> Container {
    let mut c = Container::default();
    c.push_tensor("images", &set.images);
    c.push("labels", vec![set.len()], Payload::U8(set.labels.clone()));
    c.push("class_ids", vec![set.len()], Payload::U32(set.class_ids.clone()));
    c
}

pub fn dataset_from_container(c: &Container) -> Result<LabeledImageSet> {
    LabeledImageSet::new(c.tensor("images")?, c.bytes("labels")?.to_vec(), c.u32s("class_ids")?.to_vec())
}

pub fn save_dataset(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    dataset_to_container(set).save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    dataset_from_container(&Container::load(path)?)
}
