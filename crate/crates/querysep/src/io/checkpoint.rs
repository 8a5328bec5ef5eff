//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "IQRY"
//! version u32 (currently 1)
//! config  u32 length + UTF-8 key=value lines (model.*, train.*, seed)
//! params  u32 count, then per parameter:
//!         u32 name length + name, u32 ndim + u32 dims,
//!         u8 trainable, f32 data
//! opt     u8 flag; if 1: per parameter (same order) f32 m then f32 v,
//!         then u32 group count + (name, u64 step) per optimizer group
//! rng     u64 root seed, u32 epochs done, u64 steps done
//! ```
//!
//! Loading rebuilds the model from the embedded config and overwrites every
//! parameter bit-for-bit, so save -> load is an exact round trip.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::write_replacing;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"IQRY";
pub const VERSION: u32 = 1;

/// Optimizer and progress state carried alongside the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainState {
    /// (group name, Adam step count) per optimizer group.
    pub group_steps: Vec<(String, u64)>,
    pub seed: u64,
    pub epochs_done: u32,
    pub steps_done: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, data: &[f32]) {
        self.buf.reserve(data.len() * 4);
        for &v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("{}: truncated file", self.path)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF-8 string", self.path)))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Serializes key=value pairs as the embedded config block.
pub fn kv_block(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// Parses a key=value block (the inverse of [`kv_block`]).
pub fn parse_kv_block(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Checkpoint(format!("config line {}: missing '='", i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn save(
    path: &Path,
    model: &Model<f32>,
    extra_kv: &[(String, String)],
    state: Option<&TrainState>,
) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    let mut kv = model.cfg.to_kv();
    kv.extend_from_slice(extra_kv);
    w.str(&kv_block(&kv));

    w.u32(model.params.len() as u32);
    for p in model.params.iter() {
        w.str(&p.name);
        w.u32(p.value.shape.len() as u32);
        for &d in &p.value.shape {
            w.u32(d as u32);
        }
        w.u8(p.trainable as u8);
        w.f32s(&p.value.data);
    }

    match state {
        Some(st) => {
            w.u8(1);
            for p in model.params.iter() {
                w.f32s(&p.m);
                w.f32s(&p.v);
            }
            w.u32(st.group_steps.len() as u32);
            for (name, t) in &st.group_steps {
                w.str(name);
                w.u64(*t);
            }
            w.u64(st.seed);
            w.u32(st.epochs_done);
            w.u64(st.steps_done);
        }
        None => w.u8(0),
    }

    write_replacing(path, &w.buf)
}

/// Loads a checkpoint: the model, the embedded config pairs, and the training
/// state when one was saved.
pub fn load(path: &Path) -> Result<(Model<f32>, Vec<(String, String)>, Option<TrainState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0, path: path.display().to_string() };

    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version} (expected {VERSION})",
            path.display()
        )));
    }

    let kv_text = r.str()?;
    let pairs = parse_kv_block(&kv_text)?;
    let mut cfg = ModelConfig::default();
    cfg.apply_kv(&pairs)?;

    let mut model = Model::<f32>::new(cfg, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{}: parameter count {count} does not match config ({})",
            path.display(),
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        let name = r.str()?;
        if name != p.name {
            return Err(Error::Checkpoint(format!(
                "{}: parameter order mismatch: file has '{name}', model expects '{}'",
                path.display(),
                p.name
            )));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != p.value.shape {
            return Err(Error::Checkpoint(format!(
                "{}: shape mismatch for '{name}': file {shape:?}, model {:?}",
                path.display(),
                p.value.shape
            )));
        }
        p.trainable = r.u8()? != 0;
        let data = r.f32s(p.value.numel())?;
        p.value = Tensor::from_vec(&shape, data);
    }

    let state = if r.u8()? == 1 {
        for p in model.params.iter_mut() {
            p.m = r.f32s(p.value.numel())?;
            p.v = r.f32s(p.value.numel())?;
        }
        let groups = r.u32()? as usize;
        let mut group_steps = Vec::with_capacity(groups);
        for _ in 0..groups {
            let name = r.str()?;
            let t = r.u64()?;
            group_steps.push((name, t));
        }
        Some(TrainState {
            group_steps,
            seed: r.u64()?,
            epochs_done: r.u32()?,
            steps_done: r.u64()?,
        })
    } else {
        None
    };

    Ok((model, pairs, state))
}
