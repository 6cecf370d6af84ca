//! Binary checkpoints.
//!
//! ```text
//! magic "DPAFCKPT" | version u32 | run digest [32] | net config (u32 len + JSON)
//! | group count u32 | per group: name | frozen u8 | tensor count u32
//!   | per tensor: name | rank u32 | dims u64… | value count u64 | f64 values
//! ```
//! Integers and floats are little-endian; names are u32 length + UTF-8.

use std::fs;
use std::path::Path;

use super::params::{ModelParams, ParamGroup, TensorMeta};
use super::NetConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DPAFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Digest of the run configuration that produced the parameters.
    pub run_digest: [u8; 32],
    pub net: NetConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.run_digest);
        put_bytes(&mut out, &serde_json::to_vec(&self.net).expect("config serializes"));
        out.extend_from_slice(&(self.params.groups().len() as u32).to_le_bytes());
        for g in self.params.groups() {
            put_bytes(&mut out, g.name.as_bytes());
            out.push(g.frozen as u8);
            out.extend_from_slice(&(g.tensors.len() as u32).to_le_bytes());
            for t in &g.tensors {
                put_bytes(&mut out, t.name.as_bytes());
                out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for &d in &t.shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
            }
            out.extend_from_slice(&(g.values.len() as u64).to_le_bytes());
            for v in &g.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let run_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let net: NetConfig = serde_json::from_slice(r.bytes_field()?)
            .map_err(|e| Error::Checkpoint(format!("bad network config: {e}")))?;
        let n_groups = r.u32()? as usize;
        let mut groups = Vec::with_capacity(n_groups.min(64));
        for _ in 0..n_groups {
            let name = r.string()?;
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad freeze flag {b}"))),
            };
            let n_tensors = r.u32()? as usize;
            let mut tensors = Vec::with_capacity(n_tensors.min(64));
            let mut offset = 0;
            for _ in 0..n_tensors {
                let tname = r.string()?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let meta = TensorMeta { name: tname, shape, offset };
                offset += meta.len();
                tensors.push(meta);
            }
            let n_values = r.u64()? as usize;
            if n_values != offset {
                return Err(Error::Checkpoint(format!("group `{name}` has {n_values} values, tensors need {offset}")));
            }
            let raw = r.take(n_values.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            groups.push(ParamGroup { name, values, tensors, frozen });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { run_digest, net, params: ModelParams::new(groups) })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let b = self.bytes_field()?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::tiny_config;
    use crate::nn::Generator;
    use crate::noise::{Component, NoiseStream};

    fn sample() -> Checkpoint {
        let cfg = tiny_config();
        let g = Generator::new(&cfg).unwrap();
        let mut params = g.init_params(&mut NoiseStream::new(5, Component::Init, 0, 0));
        params.set_frozen("fc", true).unwrap();
        Checkpoint { run_digest: [7; 32], net: cfg, params }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
