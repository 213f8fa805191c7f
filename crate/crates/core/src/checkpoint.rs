//! Binary checkpoints.
//!
//! Model file layout, all integers little-endian:
//!
//! ```text
//! "FPAN" | version u32
//! scale u32 | channels u32 | blocks u32 | stage_depth u32 | reduction u32
//! pyramid count u32 | pyramid scales u32 ...
//! feedforward u8 | feedback u8 | attention u8
//! tensor count u32
//! per tensor: name length u16 | UTF-8 name | ndim u8 | dims u32 ... | f32 payload
//! ```
//!
//! Optimizer state lives in a sidecar with the same string and tensor
//! encoding: `"FPAO" | version u32 | count u32`, then per parameter the name,
//! the slot length u32 (0 before the first step) and the `m` and `v` slots.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{FpanError, Result};
use crate::model::{Ablation, AttentionKind, Fpan, ModelConfig};
use crate::nn::ParameterStore;
use crate::tensor::Element;

pub const MAGIC: &[u8; 4] = b"FPAN";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"FPAO";
pub const VERSION: u32 = 1;

fn err(offset: usize, message: impl Into<String>) -> FpanError {
    FpanError::Checkpoint {
        offset: offset as u64,
        message: message.into(),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| err(self.0.len(), format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn name(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| err(self.0.len(), format!("name too long: {s}")))?;
        self.u16(n);
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn floats<T: Element>(&mut self, values: &[T]) {
        self.0.reserve(values.len() * 4);
        for v in values {
            let x = v.to_f32().unwrap_or(f32::NAN);
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(err(
                self.pos,
                format!("truncated: {what} needs {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(err(at, format!("{what}: expected 0 or 1, found {v}"))),
        }
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16("name length")? as usize;
        let at = self.pos;
        let bytes = self.take(n, "name")?;
        String::from_utf8(bytes.to_vec()).map_err(|_| err(at, "tensor name is not UTF-8"))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| err(self.pos, "size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(err(0, format!("bad magic {found:?}, expected {:?}", std::str::from_utf8(magic).unwrap())));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != VERSION as usize {
            return Err(err(at, format!("unsupported version {version} (this build reads {VERSION})")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(err(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Serialize a model; values are stored as f32.
pub fn encode<T: Element>(model: &Fpan<T>) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize)?;
    for v in [c.scale, c.channels, c.num_blocks, c.stage_depth, c.reduction, c.pyramid_scales.len()] {
        w.u32(v)?;
    }
    for &s in &c.pyramid_scales {
        w.u32(s)?;
    }
    w.u8(c.ablation.feedforward_skips as u8);
    w.u8(c.ablation.feedback_skips as u8);
    w.u8(c.ablation.attention.code());
    w.u32(model.store.len())?;
    for (name, p) in model.store.iter() {
        w.name(name)?;
        w.u8(p.dims.len() as u8);
        for &d in &p.dims {
            w.u32(d)?;
        }
        w.floats(p.tensor.data());
    }
    Ok(w.0)
}

/// Parse a model. Nothing is returned unless every byte checks out.
pub fn decode(bytes: &[u8]) -> Result<Fpan<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(MAGIC)?;
    let config_at = r.pos;
    let scale = r.u32("scale")?;
    let channels = r.u32("channels")?;
    let num_blocks = r.u32("blocks")?;
    let stage_depth = r.u32("stage depth")?;
    let reduction = r.u32("reduction")?;
    let n_scales = r.u32("pyramid scale count")?;
    if n_scales > 3 {
        return Err(err(r.pos - 4, format!("{n_scales} pyramid scales (at most 3)")));
    }
    let pyramid_scales = (0..n_scales)
        .map(|_| r.u32("pyramid scale"))
        .collect::<Result<Vec<_>>>()?;
    let feedforward_skips = r.flag("feedforward flag")?;
    let feedback_skips = r.flag("feedback flag")?;
    let at = r.pos;
    let code = r.u8("attention kind")?;
    let attention = AttentionKind::from_code(code).ok_or_else(|| err(at, format!("unknown attention kind {code}")))?;
    let config = ModelConfig {
        scale,
        channels,
        num_blocks,
        stage_depth,
        pyramid_scales,
        reduction,
        ablation: Ablation {
            feedforward_skips,
            feedback_skips,
            attention,
        },
    };
    let mut model = Fpan::<f32>::skeleton(config).map_err(|e| err(config_at, format!("invalid model config: {e}")))?;

    let at = r.pos;
    let count = r.u32("tensor count")?;
    if count != model.store.len() {
        return Err(err(
            at,
            format!("{count} tensors stored, the configuration has {}", model.store.len()),
        ));
    }
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = r.pos;
        let name = r.name()?;
        let ndim = r.u8("ndim")? as usize;
        let dims = (0..ndim).map(|_| r.u32("dim")).collect::<Result<Vec<_>>>()?;
        let p = model
            .store
            .by_name_mut(&name)
            .ok_or_else(|| err(at, format!("unexpected tensor '{name}'")))?;
        if !seen.insert(name.clone()) {
            return Err(err(at, format!("tensor '{name}' stored twice")));
        }
        if dims != p.dims {
            return Err(err(at, format!("tensor '{name}' has dims {dims:?}, expected {:?}", p.dims)));
        }
        let values = r.floats(p.tensor.len(), &name)?;
        p.tensor.data_mut().copy_from_slice(&values);
    }
    r.finish()?;
    Ok(model)
}

pub fn save_checkpoint<T: Element>(model: &Fpan<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)?).map_err(|e| FpanError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Fpan<f32>> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| FpanError::io(path, e))?)
}

/// Serialize the Adam moment slots of every parameter.
pub fn encode_optimizer<T: Element>(store: &ParameterStore<T>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(OPTIMIZER_MAGIC);
    w.u32(VERSION as usize)?;
    w.u32(store.len())?;
    for (name, p) in store.iter() {
        w.name(name)?;
        w.u32(p.m.len())?;
        w.floats(&p.m);
        w.floats(&p.v);
    }
    Ok(w.0)
}

/// Restore moment slots into a store with the same parameter names.
/// The store is left untouched on error.
pub fn decode_optimizer(bytes: &[u8], store: &mut ParameterStore<f32>) -> Result<()> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(OPTIMIZER_MAGIC)?;
    let at = r.pos;
    let count = r.u32("tensor count")?;
    if count != store.len() {
        return Err(err(at, format!("{count} slots stored, the model has {} parameters", store.len())));
    }
    let mut slots = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = r.pos;
        let name = r.name()?;
        let p = store
            .by_name(&name)
            .ok_or_else(|| err(at, format!("unexpected parameter '{name}'")))?;
        if !seen.insert(name.clone()) {
            return Err(err(at, format!("parameter '{name}' stored twice")));
        }
        let at = r.pos;
        let n = r.u32("slot length")?;
        if n != 0 && n != p.tensor.len() {
            return Err(err(at, format!("slot for '{name}' has {n} values, expected {}", p.tensor.len())));
        }
        let m = r.floats(n, "m slot")?;
        let v = r.floats(n, "v slot")?;
        slots.push((name, m, v));
    }
    r.finish()?;
    for (name, m, v) in slots {
        let p = store.by_name_mut(&name).expect("checked above");
        p.m = m;
        p.v = v;
    }
    Ok(())
}

pub fn save_optimizer<T: Element>(store: &ParameterStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_optimizer(store)?).map_err(|e| FpanError::io(path, e))
}

pub fn load_optimizer(path: impl AsRef<Path>, store: &mut ParameterStore<f32>) -> Result<()> {
    let path = path.as_ref();
    decode_optimizer(&std::fs::read(path).map_err(|e| FpanError::io(path, e))?, store)
}
