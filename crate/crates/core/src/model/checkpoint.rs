//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "BUDGETFM"
//! version  u32
//! config   u32 length + UTF-8 JSON ModelConfig
//! count    u32
//! count ×  u32 name length, name bytes, u32 rank, rank × u64 extents,
//!          numel × f64
//! ```
//!
//! Parameters must appear in layout order with the shapes the config
//! implies. Decoding never allocates more than the input length justifies.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BUDGETFM";
pub const VERSION: u32 = 1;
const MAX_NAME: usize = 256;
const MAX_RANK: usize = 8;

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let mut out = Vec::with_capacity(64 + 8 * model.param_count() as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.named_params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;

    let count = r.u32("parameter count")? as usize;
    let layout = config.param_layout();
    if count != layout.len() {
        return Err(Error::Checkpoint(format!(
            "config implies {} parameters, file has {count}",
            layout.len()
        )));
    }
    let mut named = Vec::with_capacity(count);
    for (want_name, want_shape) in layout {
        let name_len = r.u32("name length")? as usize;
        if name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!("parameter name length {name_len} too long")));
        }
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = r.u64("extent")?;
            shape.push(usize::try_from(e).map_err(|_| Error::Checkpoint(format!("{name}: extent {e} too large")))?);
        }
        if name != want_name || shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} {shape:?} does not match expected {want_name:?} {want_shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(Error::Checkpoint(format!("{name}: data truncated")));
        }
        let data: Vec<f64> = r
            .take(numel * 8, "data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.push((name, Tensor::new(&shape, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Model::from_params(config, named)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
