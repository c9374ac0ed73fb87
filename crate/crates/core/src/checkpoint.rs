//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! "DMLF" u32 version
//! u32 len, config JSON
//! u64 rng seed, u64 rng counter
//! u32 n_params, then per parameter (sorted by name):
//!     u32 len, name | u8 frozen | u8 decay | u32 ndim | u64 dims.. | f32 data..
//! u8 has_optimizer, and if 1:
//!     f32 beta1, beta2, eps, weight_decay | u32 n_slots, then per slot:
//!     u32 len, name | u64 step | u64 numel | f32 m.. | f32 v..
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use dmlf_tensor::{RngState, Tensor};

use crate::error::{DmlfError, Result};
use crate::optim::{AdamSlot, AdamW};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"DMLF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub rng: RngState,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| DmlfError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| DmlfError::Checkpoint("name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| DmlfError::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(DmlfError::Checkpoint(format!("bad flag byte {b}"))),
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config_json);
        put_u64(&mut out, self.rng.seed);
        put_u64(&mut out, self.rng.counter);
        put_u32(&mut out, self.params.len() as u32);
        for (name, p) in self.params.iter() {
            put_str(&mut out, name);
            out.push(u8::from(p.frozen));
            out.push(u8::from(p.decay));
            put_u32(&mut out, p.value.ndim() as u32);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f32s(&mut out, p.value.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_f32s(&mut out, &[opt.beta1, opt.beta2, opt.eps, opt.weight_decay]);
                put_u32(&mut out, opt.slots.len() as u32);
                for (name, s) in &opt.slots {
                    put_str(&mut out, name);
                    put_u64(&mut out, s.step);
                    put_u64(&mut out, s.m.numel() as u64);
                    put_f32s(&mut out, s.m.data());
                    put_f32s(&mut out, s.v.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DmlfError::Checkpoint("bad magic, not a DMLF checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DmlfError::Checkpoint(format!("unsupported version {version}")));
        }
        let config_json = r.str()?;
        let rng = RngState {
            seed: r.u64()?,
            counter: r.u64()?,
        };
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let frozen = r.flag()?;
            let decay = r.flag()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let value = Tensor::new(shape, r.f32s(numel)?)?;
            if params.contains(&name) {
                return Err(DmlfError::Checkpoint(format!("duplicate parameter '{name}'")));
            }
            params.insert(name, value, frozen, decay);
        }
        let optimizer = if r.flag()? {
            let h = r.f32s(4)?;
            let mut slots = BTreeMap::new();
            for _ in 0..r.u32()? {
                let name = r.str()?;
                let step = r.u64()?;
                let n = r.u64()? as usize;
                let shape = params.tensor(&name).map(|t| t.shape().to_vec()).map_err(|_| {
                    DmlfError::Checkpoint(format!("optimizer slot for unknown parameter '{name}'"))
                })?;
                let m = Tensor::new(shape.clone(), r.f32s(n)?)?;
                let v = Tensor::new(shape, r.f32s(n)?)?;
                slots.insert(name, AdamSlot { step, m, v });
            }
            Some(AdamW {
                beta1: h[0],
                beta2: h[1],
                eps: h[2],
                weight_decay: h[3],
                slots,
            })
        } else {
            None
        };
        if r.pos != buf.len() {
            return Err(DmlfError::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config_json,
            rng,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::vector(vec![1.0, -0.0, f32::MIN_POSITIVE]), false, true);
        params.insert("b", Tensor::zeros(&[2, 3]), true, false);
        let mut opt = AdamW::new(&TrainConfig::default());
        opt.slots.insert(
            "a.w".into(),
            AdamSlot {
                step: 7,
                m: Tensor::vector(vec![0.1, 0.2, 0.3]),
                v: Tensor::vector(vec![1.0, 2.0, 3.0]),
            },
        );
        Checkpoint {
            config_json: "{\"seed\": 3}".into(),
            rng: RngState { seed: 3, counter: 12 },
            params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let c = Checkpoint { optimizer: None, ..c };
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        let err = Checkpoint::from_bytes(&magic).unwrap_err();
        assert_eq!(err.category(), "checkpoint");
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
