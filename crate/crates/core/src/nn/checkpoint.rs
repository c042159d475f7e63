//! Checkpoint container, version 1. All integers little-endian.
//!
//! ```text
//! magic      8 bytes  "LODSEGCK"
//! version    u32      1
//! config     u32 length + UTF-8 JSON of NetworkConfig
//! frozen     u32 count + count x u8 level tag (0, 1, 2 = head)
//! params     u32 count, then per parameter:
//!              u16 name length + UTF-8 name
//!              u8 level tag
//!              u8 rank + rank x u32 dims
//!              product(dims) x f32
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::config::NetworkConfig;
use super::state::{Level, NetworkState, Param};
use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 8] = b"LODSEGCK";
pub const VERSION: u32 = 1;

pub fn encode(state: &NetworkState) -> Vec<u8> {
    let mut b = Vec::with_capacity(state.param_count() * 4 + 4096);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&state.config).expect("config serializes");
    b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    b.extend_from_slice(&cfg);
    b.extend_from_slice(&(state.frozen.len() as u32).to_le_bytes());
    b.extend(state.frozen.iter().map(|l| l.tag()));
    b.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (name, p) in &state.params {
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(p.level.tag());
        b.push(p.shape.len() as u8);
        for &d in &p.shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn level(&mut self) -> Result<Level> {
        let t = self.u8()?;
        Level::from_tag(t).ok_or_else(|| Error::Format(format!("unknown level tag {t}")))
    }
}

pub fn decode(buf: &[u8]) -> Result<NetworkState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Migration { found: version, expected: VERSION });
    }
    let n = r.u32()? as usize;
    let config: NetworkConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let nf = r.u32()?;
    let mut frozen = BTreeSet::new();
    for _ in 0..nf {
        frozen.insert(r.level()?);
    }
    let np = r.u32()?;
    let mut params = BTreeMap::new();
    for _ in 0..np {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let level = r.level()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Param { level, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    let state = NetworkState { config, params, frozen };
    state.config.validate()?;
    state.check_consistent()?;
    Ok(state)
}

pub fn save_checkpoint(state: &NetworkState, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &encode(state))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkState> {
    let path = path.as_ref();
    decode(&fsutil::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint that must produce `num_classes` outputs.
pub fn load_checkpoint_for(path: impl AsRef<Path>, num_classes: usize) -> Result<NetworkState> {
    let s = load_checkpoint(path)?;
    if s.num_classes() != num_classes {
        return Err(Error::ClassMismatch { found: s.num_classes(), expected: num_classes });
    }
    Ok(s)
}
