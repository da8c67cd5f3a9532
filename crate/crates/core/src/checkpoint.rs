//! Binary checkpoints: a fixed header followed by named little-endian f32
//! blobs for parameters, buffers and (optionally) optimiser velocity.
//!
//! ```text
//! magic "ONECKPT\0" | u32 version | u64 arch hash | u32 branches | u32 classes
//! u32 flags (1 gated, 2 shared trunk, 4 train state) | u64 seed
//! str arch json | str meta json | u64 next_epoch | u32 blob count
//! blob: u8 kind | str name | u32 ndim | u32 dims.. | f32 data..
//! ```
//! Strings are a u32 byte length followed by UTF-8. All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, Layout, MultiBranchModel};
use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ONECKPT\0";
pub const VERSION: u32 = 1;

const FLAG_GATED: u32 = 1;
const FLAG_SHARED: u32 = 2;
const FLAG_TRAIN_STATE: u32 = 4;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_VELOCITY: u8 = 2;

/// Optimiser state needed to resume training at `next_epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub next_epoch: usize,
    pub optimizer: OptimizerState<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MultiBranchModel<f32>,
    pub seed: u64,
    /// Free-form JSON recorded by the writer (e.g. the run config).
    pub meta: String,
    pub train_state: Option<TrainState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
    fn blob(&mut self, kind: u8, name: &str, t: &Tensor<f32>) {
        self.u8(kind);
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.0.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Parse {
            offset: self.pos as u64,
            message: format!("checkpoint truncated: need {n} more bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Parse { offset: at as u64, message: "invalid UTF-8 string".into() })
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u32()? as usize;
        let dims = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("blob too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Tensor::new(dims, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn encode(model: &MultiBranchModel<f32>, seed: u64, meta: &str, train_state: Option<&TrainState>) -> Vec<u8> {
    let layout = model.layout();
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION);
    w.u64(model.arch().hash());
    w.u32(layout.branches as u32);
    w.u32(model.num_classes() as u32);
    let mut flags = 0;
    if layout.gated {
        flags |= FLAG_GATED;
    }
    if layout.shared_trunk {
        flags |= FLAG_SHARED;
    }
    if train_state.is_some() {
        flags |= FLAG_TRAIN_STATE;
    }
    w.u32(flags);
    w.u64(seed);
    w.str(&serde_json::to_string(model.arch()).expect("arch serialises"));
    w.str(meta);
    w.u64(train_state.map_or(0, |s| s.next_epoch as u64));
    let store = model.store();
    let velocity = train_state.map_or(&[][..], |s| &s.optimizer.velocity[..]);
    w.u32((store.params().len() + store.buffers().len() + velocity.len()) as u32);
    for p in store.params() {
        w.blob(KIND_PARAM, &p.name, &p.value);
    }
    for b in store.buffers() {
        w.blob(KIND_BUFFER, &b.name, &b.value);
    }
    for (p, v) in store.params().iter().zip(velocity) {
        w.blob(KIND_VELOCITY, &p.name, v);
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Parse { offset: 0, message: "not a checkpoint (bad magic)".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let branches = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let flags = r.u32()?;
    let seed = r.u64()?;
    let arch: ArchSpec =
        serde_json::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("architecture record: {e}")))?;
    if arch.hash() != hash {
        return Err(Error::Checkpoint("architecture hash mismatch".into()));
    }
    if arch.num_classes != classes {
        return Err(Error::Checkpoint(format!("header says {classes} classes, architecture {}", arch.num_classes)));
    }
    let meta = r.str()?;
    let next_epoch = r.u64()? as usize;
    let count = r.u32()? as usize;
    let layout = Layout { branches, shared_trunk: flags & FLAG_SHARED != 0, gated: flags & FLAG_GATED != 0 };
    let mut store = ParamStore::<f32>::new();
    let mut velocity = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let kind = r.u8()?;
        let name = r.str()?;
        let t = r.tensor()?;
        match kind {
            KIND_PARAM => {
                store.add_param(name, t)?;
            }
            KIND_BUFFER => {
                store.add_buffer(name, t)?;
            }
            KIND_VELOCITY => velocity.push((name, t)),
            k => return Err(Error::Parse { offset: at as u64, message: format!("unknown blob kind {k}") }),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse { offset: r.pos as u64, message: "trailing bytes after last blob".into() });
    }
    let model = MultiBranchModel::from_parts(arch, layout, seed, store)?;
    let train_state = if flags & FLAG_TRAIN_STATE != 0 {
        let params = model.store().params();
        if velocity.len() != params.len() || velocity.iter().zip(params).any(|((n, v), p)| *n != p.name || v.shape() != p.value.shape()) {
            return Err(Error::Checkpoint("velocity buffers do not match parameters".into()));
        }
        Some(TrainState { next_epoch, optimizer: OptimizerState { velocity: velocity.into_iter().map(|(_, v)| v).collect() } })
    } else {
        None
    };
    Ok(Checkpoint { model, seed, meta, train_state })
}

/// Writes atomically via a temporary sibling file.
pub fn save(path: &Path, model: &MultiBranchModel<f32>, seed: u64, meta: &str, train_state: Option<&TrainState>) -> Result<()> {
    let bytes = encode(model, seed, meta, train_state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
