//! Checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "TAR1" version config_len config_text
//! { name_len name rank dims[rank] f32[prod(dims)] }*
//! ```
//!
//! Model arrays come first, in layout order, followed by the optional
//! optimizer state (`optimizer.m`, `optimizer.v`, `optimizer.t`) and the
//! step counter `train.step`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::cli::config::Config;
use crate::cli::write_atomic;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::train::Optimizer;

pub const MAGIC: &[u8; 4] = b"TAR1";
pub const VERSION: u32 = 1;

const WHAT: &str = "checkpoint";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub params: ModelParams<f32>,
    pub optimizer: Option<Optimizer<f32>>,
    /// Number of completed training steps.
    pub step: usize,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ck.params.data.len() * 12);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let text = ck.config.to_text();
    put_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());
    for e in &ck.params.layout.entries {
        put_array(&mut out, &e.name, &e.shape, &ck.params.data[e.range.clone()]);
    }
    if let Some(opt) = &ck.optimizer {
        let n = opt.m.len();
        put_array(&mut out, "optimizer.m", &[n], &opt.m);
        put_array(&mut out, "optimizer.v", &[n], &opt.v);
        put_array(&mut out, "optimizer.t", &[1], &[opt.t as f32]);
    }
    put_array(&mut out, "train.step", &[1], &[ck.step as f32]);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(WHAT, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(WHAT, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(WHAT, "config block is not UTF-8"))?;
    let config = Config::from_text(text).map_err(|e| Error::format(WHAT, format!("config block: {e}")))?;
    let model_cfg = config
        .model_config()
        .map_err(|e| Error::format(WHAT, format!("config block: {e}")))?;

    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    while !r.done() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(WHAT, "array name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let bytes = r.take(count.checked_mul(4).ok_or_else(|| Error::format(WHAT, "array too large"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if arrays.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::format(WHAT, format!("duplicate array {name}")));
        }
    }

    let mut params = ModelParams::<f32>::init(model_cfg)?;
    let layout = params.layout.clone();
    for e in &layout.entries {
        let (dims, data) = arrays
            .remove(&e.name)
            .ok_or_else(|| Error::format(WHAT, format!("missing array {}", e.name)))?;
        if dims != e.shape {
            return Err(Error::format(
                WHAT,
                format!("array {} has dims {dims:?}, config implies {:?}", e.name, e.shape),
            ));
        }
        params.data[e.range.clone()].copy_from_slice(&data);
    }
    let mut scalar = |name: &str| -> Result<Option<f32>> {
        match arrays.remove(name) {
            None => Ok(None),
            Some((dims, data)) if dims == [1] => Ok(Some(data[0])),
            Some((dims, _)) => Err(Error::format(WHAT, format!("array {name} has dims {dims:?}, expected [1]"))),
        }
    };
    let step = scalar("train.step")?.unwrap_or(0.0) as usize;
    let t = scalar("optimizer.t")?;
    let m = arrays.remove("optimizer.m");
    let v = arrays.remove("optimizer.v");
    let optimizer = match (m, v, t) {
        (Some((_, m)), Some((_, v)), Some(t)) => Some(
            Optimizer::restore(&params, m, v, t as u64).map_err(|e| Error::format(WHAT, e.to_string()))?,
        ),
        (None, None, None) => None,
        _ => return Err(Error::format(WHAT, "incomplete optimizer state")),
    };
    if let Some(name) = arrays.keys().next() {
        return Err(Error::format(WHAT, format!("unexpected array {name}")));
    }
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        step,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &to_bytes(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&buf)
}

/// Writes the bytes of `ck` to any sink.
pub fn write_to(ck: &Checkpoint, out: &mut impl Write) -> Result<()> {
    out.write_all(&to_bytes(ck))?;
    Ok(())
}
