//! Single-file checkpoint archive.
//!
//! Layout (little endian):
//! `MREGCKPT` magic, `u32` version, 32-byte SHA-256 of the config JSON,
//! `u32` length + config JSON, `u64` epoch, `u32` length + metrics JSON,
//! `u32` parameter count, then per parameter `u16` name length, name,
//! `u8` rank, `u32` dims, `f64` values; finally a `u8` optimizer flag and,
//! when set, the `u64` step count and the first and second moments of every
//! parameter in order.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::tensor::{hex_string, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MREGCKPT";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_json: String,
    pub epoch: u64,
    pub metrics_json: String,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

pub fn config_digest(config_json: &str) -> [u8; 32] {
    Sha256::digest(config_json.as_bytes()).into()
}

impl Checkpoint {
    pub fn config_digest_hex(&self) -> String {
        hex_string(&config_digest(&self.config_json))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.num_scalars() * if self.optimizer.is_some() { 3 } else { 1 });
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&config_digest(&self.config_json));
        put_str(&mut out, &self.config_json)?;
        out.extend_from_slice(&self.epoch.to_le_bytes());
        put_str(&mut out, &self.metrics_json)?;
        put_u32(&mut out, self.params.len())?;
        for (name, t) in self.params.iter() {
            let len = u16::try_from(name.len()).map_err(|_| Error::format("checkpoint", format!("parameter name {name} too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, t)?;
        }
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                if s.m.len() != self.params.len() || s.v.len() != self.params.len() {
                    return Err(Error::format("checkpoint", "optimizer state does not cover every parameter"));
                }
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                for t in s.m.iter().chain(&s.v) {
                    put_tensor(&mut out, t)?;
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let config_json = r.string()?;
        if config_digest(&config_json) != digest {
            return Err(Error::format("checkpoint", "config digest mismatch"));
        }
        let epoch = r.u64()?;
        let metrics_json = r.string()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?
                .to_string();
            if params.id(&name).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate parameter {name}")));
            }
            let t = r.tensor()?;
            params.add(name, t);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut read_all = || -> Result<Vec<Tensor>> {
                    params
                        .iter()
                        .map(|(name, p)| {
                            let t = r.tensor()?;
                            if t.shape() != p.shape() {
                                return Err(Error::format("checkpoint", format!("optimizer moment shape for {name}")));
                            }
                            Ok(t)
                        })
                        .collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(AdamState { step, m, v })
            }
            f => return Err(Error::format("checkpoint", format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config_json, epoch, metrics_json, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("checkpoint", format!("length {v} exceeds 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    if t.shape().len() > MAX_RANK {
        return Err(Error::format("checkpoint", format!("rank {} tensor", t.shape().len())));
    }
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|_| Error::format("checkpoint", "string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        if rank > MAX_RANK {
            return Err(Error::format("checkpoint", format!("rank {rank} tensor")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            n = n.checked_mul(d).ok_or_else(|| Error::format("checkpoint", "tensor size overflows"))?;
            shape.push(d);
        }
        let bytes_needed = n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "tensor size overflows"))?;
        let raw = self.take(bytes_needed)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_opt: bool) -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a.weight", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 0.0]).unwrap());
        params.add("b", Tensor::scalar(3.0));
        let optimizer = with_opt.then(|| AdamState {
            step: 7,
            m: vec![Tensor::full(&[2, 2], 0.1), Tensor::scalar(0.2)],
            v: vec![Tensor::full(&[2, 2], 0.3), Tensor::scalar(0.4)],
        });
        Checkpoint { config_json: "{\"k\":1}".into(), epoch: 5, metrics_json: "{}".into(), params, optimizer }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_opt in [false, true] {
            let c = sample(with_opt);
            let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
            assert_eq!(back.params.digest(), c.params.digest());
            assert_eq!(back.optimizer, c.optimizer);
            assert_eq!((back.epoch, back.config_json, back.metrics_json), (5, c.config_json.clone(), c.metrics_json.clone()));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample(true).encode().unwrap();
        for cut in [0, 7, 12, 50, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut tampered = bytes.clone();
        // first byte of the config JSON
        tampered[8 + 4 + 32 + 4] ^= 1;
        assert!(matches!(Checkpoint::decode(&tampered), Err(Error::Format { .. })));
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::decode(&version).is_err());
    }
}
