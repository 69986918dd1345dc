//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "PCSSLCKP"
//! version    u32      currently 1
//! epoch      u32      completed epochs
//! step       u64      optimizer steps taken
//! seed       u64
//! fingerprint u64     FNV-1a of the config text
//! config     u32 length + UTF-8 config file text
//! count      u32      number of parameters
//! per parameter:
//!   name     u16 length + UTF-8
//!   ndim     u8, then ndim × u32 dims
//!   value, m, v   numel × f32 each
//! ```
//!
//! Two checkpoints with identical parameters and state serialize to
//! identical bytes.

use std::path::Path;

use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::models::ParamStore;

pub const MAGIC: &[u8; 8] = b"PCSSLCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed epochs; training resumes at this 0-based epoch.
    pub epoch: usize,
    pub step: u64,
    /// Root seed. Every random stream is a pure function of the seed,
    /// the epoch and the sample index, so this is the full RNG state.
    pub seed: u64,
    pub fingerprint: u64,
    pub config: String,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, config: String, fingerprint: u64, seed: u64, epoch: usize, step: u64) -> Self {
        let f = |xs: &[T]| xs.iter().map(|x| x.to_f32().unwrap()).collect::<Vec<f32>>();
        let params = store
            .params()
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape.clone(),
                value: f(&p.value.data),
                m: f(&p.m),
                v: f(&p.v),
            })
            .collect();
        Self {
            epoch,
            step,
            seed,
            fingerprint,
            config,
            params,
        }
    }

    /// Copies values and moments into a store built from the same config.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, r) in store.params_mut().iter_mut().zip(&self.params) {
            if p.name != r.name || p.value.shape != r.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model {} {:?}, checkpoint {} {:?}",
                    p.name, p.value.shape, r.name, r.shape
                )));
            }
            let t = |xs: &[f32]| xs.iter().map(|&x| T::lit(x as f64)).collect::<Vec<T>>();
            p.value = Tensor {
                shape: r.shape.clone(),
                data: t(&r.value),
            };
            p.m = t(&r.m);
            p.v = t(&r.v);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.fingerprint.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            b.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            b.extend_from_slice(p.name.as_bytes());
            b.push(p.shape.len() as u8);
            for &d in &p.shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for xs in [&p.value, &p.m, &p.v] {
                for x in xs {
                    b.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let epoch = r.u32()? as usize;
        let step = r.u64()?;
        let seed = r.u64()?;
        let fingerprint = r.u64()?;
        let len = r.u32()? as usize;
        let config = r.string(len)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.string(len)?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let value = r.f32s(numel)?;
            let m = r.f32s(numel)?;
            let v = r.f32s(numel)?;
            params.push(ParamRecord { name, shape, value, m, v });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            epoch,
            step,
            seed,
            fingerprint,
            config,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.25, 0.0, -0.0]).unwrap());
        store.add("a.bias", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        store.params_mut()[1].m[2] = 7.5;
        Checkpoint::from_store(&store, "epochs = 3\n".into(), 42, 9, 2, 17)
    }

    #[test]
    fn round_trip_is_identity() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn header_and_truncation_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[8] = 9;
        let e = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
        assert!(e.contains("version 9"), "{e}");
        let e = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let c = sample();
        let mut store = ParamStore::<f64>::new();
        store.add("a.weight", Tensor::zeros(vec![2, 3]));
        store.add("a.bias", Tensor::zeros(vec![3]));
        c.load_into(&mut store).unwrap();
        assert_eq!(store.params()[0].value.data[3], 3.25);
        assert_eq!(store.params()[1].m[2], 7.5);
        let mut wrong = ParamStore::<f64>::new();
        wrong.add("a.weight", Tensor::zeros(vec![3, 2]));
        wrong.add("a.bias", Tensor::zeros(vec![3]));
        assert!(c.load_into(&mut wrong).is_err());
    }
}
