//! Versioned little-endian checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic "RSTRCKPT" | u32 version | u32 dtype code
//! u32 len | model config text
//! u64 training step | u64 optimizer step | u8 has moments
//! u32 count, then per parameter:
//!   u16 len | name | u8 trainable | u32 rank | u64 dims... | values
//!   [m values | v values]   (trainable parameters, when moments are present)
//! ```
//!
//! Controller parameters are stored like any other (frozen) parameter, so the
//! EMA state travels with the weights.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::model::{ModelConfig, Restorer};
use crate::tensor::{Float, Tensor};
use crate::train::OptimState;

const MAGIC: &[u8; 8] = b"RSTRCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Short hex digest identifying a configuration text.
pub fn config_hash(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub struct Checkpoint<T: Float> {
    pub model: Restorer<T>,
    pub optim: Option<OptimState<T>>,
    pub step: u64,
}

pub fn encode<T: Float>(model: &Restorer<T>, optim: Option<&OptimState<T>>, step: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&optim.map_or(0, |o| o.t).to_le_bytes());
    out.push(optim.is_some() as u8);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (id, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let mut put = |t: &Tensor<T>| t.data().iter().for_each(|v| v.write_le(&mut out));
        put(&p.value);
        if let (Some(o), true) = (optim, p.trainable) {
            put(&o.m[id.index()]);
            put(&o.v[id.index()]);
        }
    }
    out
}

/// Write via a temporary file and rename, so a crash never leaves a torn
/// checkpoint behind.
pub fn save<T: Float>(
    path: &Path,
    model: &Restorer<T>,
    optim: Option<&OptimState<T>>,
    step: u64,
) -> Result<()> {
    let bytes = encode(model, optim, step);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn values<T: Float>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let raw = self.take(n * size)?;
        Tensor::new(shape, raw.chunks_exact(size).map(T::read_le).collect())
    }
}

/// Parse a checkpoint and load it into a skeleton built from its embedded
/// configuration. Any name or shape disagreement is a config error.
pub fn decode<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(config_err!("unsupported checkpoint version {version}"));
    }
    let dtype = r.u32()?;
    if dtype != T::DTYPE.code() {
        return Err(config_err!(
            "checkpoint dtype code {dtype} does not match requested {:?}",
            T::DTYPE
        ));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Data("config text is not UTF-8".into()))?;
    let config = ModelConfig::from_text(text)?;
    let step = r.u64()?;
    let t = r.u64()?;
    let has_moments = r.u8()? != 0;
    let mut model = Restorer::<T>::build(config, 0)?;
    let mut optim = has_moments.then(|| OptimState::new(&model.store));
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(config_err!(
            "checkpoint has {count} parameters, configuration builds {}",
            model.store.len()
        ));
    }
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
            .to_string();
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(r.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .lookup(&name)
            .ok_or_else(|| config_err!("checkpoint parameter {name} not in model"))?;
        if model.store.value(id).shape() != shape.as_slice() {
            return Err(config_err!(
                "shape mismatch for {name}: checkpoint {shape:?}, model {:?}",
                model.store.value(id).shape()
            ));
        }
        if model.store.get(id).trainable != trainable {
            return Err(config_err!("trainable flag mismatch for {name}"));
        }
        model.store.set_value(id, r.values(&shape)?)?;
        if let (Some(o), true) = (optim.as_mut(), trainable) {
            o.m[id.index()] = r.values(&shape)?;
            o.v[id.index()] = r.values(&shape)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    if let Some(o) = optim.as_mut() {
        o.t = t;
    }
    Ok(Checkpoint { model, optim, step })
}
