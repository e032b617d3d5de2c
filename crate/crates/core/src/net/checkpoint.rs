//! `ACAN` checkpoint container.
//!
//! Layout (little-endian): magic `ACAN`, u32 version, u32 length of the
//! configuration TOML followed by its UTF-8 bytes, u32 tensor count, then per
//! tensor: u32 key length, key bytes, u32 rank, rank × u32 dims, f32 data.
//! Parameters and running statistics share the tensor list; which is which
//! follows from the configuration.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::{param_specs, NetParams, Tensor};
use super::NetConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ACAN";
const VERSION: u32 = 1;

pub fn checkpoint_bytes(p: &NetParams<f32>) -> Result<Vec<u8>> {
    let cfg = toml::to_string(&p.config).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + cfg.len() + 4 * p.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let n = p.params.len() + p.buffers.len();
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for (key, t) in p.params.iter().chain(&p.buffers) {
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

pub fn parse_checkpoint(buf: &[u8]) -> Result<NetParams<f32>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config: NetConfig =
        toml::from_str(c.string()?).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let specs: BTreeMap<String, _> = param_specs(&config)?
        .into_iter()
        .map(|s| (s.key.clone(), s))
        .collect();
    let count = c.u32()? as usize;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for _ in 0..count {
        let key = c.string()?.to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let spec = specs
            .get(&key)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {key}")))?;
        if spec.shape != shape {
            return Err(Error::Format(format!(
                "tensor {key} has shape {shape:?}, configuration implies {:?}",
                spec.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let dst = if spec.trainable { &mut params } else { &mut buffers };
        if dst.insert(key.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::Format(format!("duplicate tensor {key}")));
        }
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - c.pos)));
    }
    if params.len() + buffers.len() != specs.len() {
        let missing: Vec<_> = specs
            .keys()
            .filter(|k| !params.contains_key(*k) && !buffers.contains_key(*k))
            .take(3)
            .collect();
        return Err(Error::Format(format!("checkpoint lacks tensors, e.g. {missing:?}")));
    }
    Ok(NetParams {
        config,
        params,
        buffers,
    })
}

pub fn write_checkpoint(p: &NetParams<f32>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(p)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<NetParams<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_model, InputShape};

    fn model() -> NetParams<f32> {
        let cfg = NetConfig::micro().with_input(InputShape {
            mel_channels: 3,
            mel_bins: 8,
            gcc_pairs: 3,
            gcc_bins: 8,
            frames: 8,
        });
        build_model(&cfg).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut p = model();
        p.buffers.values_mut().next().unwrap().data[0] = 0.3712;
        let bytes = checkpoint_bytes(&p).unwrap();
        let q = parse_checkpoint(&bytes).unwrap();
        assert_eq!(q, p);
        assert_eq!(checkpoint_bytes(&q).unwrap(), bytes);
    }

    #[test]
    fn damage_is_reported() {
        let bytes = checkpoint_bytes(&model()).unwrap();
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_checkpoint(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(parse_checkpoint(&bad).is_err());
    }
}
