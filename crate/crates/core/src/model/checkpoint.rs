//! Binary checkpoint format.
//!
//! `BGTX` magic, `u32` version, ten `u32` configuration words, then every
//! parameter tensor as name length, name bytes, rank, dims and `f32` data,
//! all little-endian, until end of file. Values are stored as `f32`, so a
//! model whose parameters are already `f32`-representable round-trips
//! bit-exactly.

use std::path::Path;

use super::config::ModelConfig;
use super::params::{ModelParams, ParamLayout};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BGTX";
const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + params.len() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for w in params.config().to_words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for e in params.layout().entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &params.values()[e.offset..e.offset + e.len()] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut words = [0u32; 10];
    for w in &mut words {
        *w = r.u32("config")?;
    }
    let config = ModelConfig::from_words(words);
    config.validate()?;
    let total = ParamLayout::new(&config).total();
    let mut params = ModelParams::from_values(config, vec![0.0; total])?;
    let mut seen = vec![false; params.layout().entries().len()];
    while !r.done() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32("tensor rank")? as usize;
        if rank > 4 {
            return Err(Error::Corrupt(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let idx = params
            .layout()
            .entries()
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Corrupt(format!("unknown tensor {name}")))?;
        let entry = params.layout().entries()[idx].clone();
        if entry.shape != shape {
            return Err(Error::DimensionMismatch(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                entry.shape
            )));
        }
        if seen[idx] {
            return Err(Error::Corrupt(format!("tensor {name} appears twice")));
        }
        seen[idx] = true;
        let data = r.take(entry.len() * 4, "tensor data")?;
        let dst = &mut params.values_mut()[entry.offset..entry.offset + entry.len()];
        for (d, c) in dst.iter_mut().zip(data.chunks_exact(4)) {
            *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Truncated(format!(
            "checkpoint is missing tensor {}",
            params.layout().entries()[i].name
        )));
    }
    if !params.values().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(params)
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ModelParams::init(ModelConfig::tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(q.config(), p.config());
        assert_eq!(q.values(), p.values());
        assert_eq!(encode_checkpoint(&q), bytes);
    }

    #[test]
    fn header_layout() {
        let p = ModelParams::init(ModelConfig::tiny(), 0).unwrap();
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..4], b"BGTX");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let cfg = ModelConfig::tiny();
        assert_eq!(
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            cfg.image_size.0
        );
    }

    #[test]
    fn rejects_corruption() {
        let p = ModelParams::init(ModelConfig::tiny(), 0).unwrap();
        let mut bytes = encode_checkpoint(&p);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 2]),
            Err(Error::Truncated(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = encode_checkpoint(&p);
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadVersion { .. })));
    }
}
