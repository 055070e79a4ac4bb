//! Binary training snapshots.
//!
//! Layout, all little-endian: `FNRF`, version `u32`, config text, iteration
//! `u64`, scheduler state, camera intrinsics, named `f64` tensors, then one record per optimizer
//! group. Strings and arrays carry `u32`/`u64` length prefixes.

use std::path::Path;

use diffcore::Tensor;

use super::config::TrainConfig;
use crate::camgeo::CameraIntrinsics;
use super::schedule::PlateauScheduler;
use crate::error::{Error, Result};
use crate::oracleio::formats::{read_file, write_file};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FNRF";
pub const CHECKPOINT_VERSION: u32 = 1;

// Upper bounds that keep corrupt headers from allocating wildly.
const MAX_COUNT: u64 = 1 << 24;
const MAX_STRING: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub group: String,
    pub lr: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Iterations completed.
    pub iteration: u64,
    pub scheduler: PlateauScheduler,
    pub camera: CameraIntrinsics,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizers: Vec<OptimizerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            Error::parse("checkpoint", self.pos, format!("truncated, needed {n} more bytes"))
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn count(&mut self, limit: u64, wide: bool) -> Result<usize> {
        let at = self.pos;
        let n = if wide { self.u64()? } else { u64::from(self.u32()?) };
        if n > limit {
            return Err(Error::parse("checkpoint", at, format!("length {n} exceeds limit {limit}")));
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.count(MAX_STRING, false)?;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::parse("checkpoint", at, "string is not UTF-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(MAX_COUNT, true)?;
        let bytes = self.take(8 * n)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config.to_text());
        w.u64(self.iteration);
        let s = &self.scheduler;
        w.f64(s.best);
        w.u64(s.stall as u64);
        w.u64(s.events as u64);
        w.f64(s.scale);
        let k = &self.camera;
        for v in [k.fx, k.fy, k.cx, k.cy] {
            w.f64(v);
        }
        w.u64(k.width as u64);
        w.u64(k.height as u64);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.u32(self.optimizers.len() as u32);
        for o in &self.optimizers {
            w.str(&o.group);
            w.f64(o.lr);
            w.u64(o.step);
            w.u32(o.first.len() as u32);
            for (m, v) in o.first.iter().zip(&o.second) {
                w.f64s(m);
                w.f64s(v);
            }
        }
        w.0
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        let mut r = Reader { b, pos: 0 };
        if r.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::parse("checkpoint", 0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse("checkpoint", 4, format!("unsupported version {version}")));
        }
        let config = TrainConfig::parse(&r.str()?)?;
        let iteration = r.u64()?;
        let mut scheduler = PlateauScheduler::new(&config);
        scheduler.best = r.f64()?;
        scheduler.stall = r.u64()? as usize;
        scheduler.events = r.u64()? as usize;
        scheduler.scale = r.f64()?;
        let at = r.pos;
        let (fx, fy, cx, cy) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let (width, height) = (r.count(MAX_COUNT, true)?, r.count(MAX_COUNT, true)?);
        let camera = CameraIntrinsics::new(fx, fy, cx, cy, width, height)
            .map_err(|e| Error::parse("checkpoint", at, format!("camera: {e}")))?;
        let n = r.count(MAX_COUNT, false)?;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.str()?;
            let rank = r.count(8, false)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.count(MAX_COUNT, true)?);
            }
            let at = r.pos;
            let data = r.f64s()?;
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::parse("checkpoint", at, format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let groups = r.count(64, false)?;
        let mut optimizers = Vec::with_capacity(groups);
        for _ in 0..groups {
            let group = r.str()?;
            let lr = r.f64()?;
            let step = r.u64()?;
            let k = r.count(MAX_COUNT, false)?;
            let (mut first, mut second) = (Vec::with_capacity(k.min(1024)), Vec::with_capacity(k.min(1024)));
            for _ in 0..k {
                first.push(r.f64s()?);
                second.push(r.f64s()?);
            }
            optimizers.push(OptimizerState {
                group,
                lr,
                step,
                first,
                second,
            });
        }
        if r.pos != b.len() {
            return Err(Error::parse("checkpoint", r.pos, format!("{} trailing bytes", b.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            iteration,
            scheduler,
            camera,
            tensors,
            optimizers,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        write_file(&tmp, &self.encode())?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}
