//! DFWU weight blob codec.
//!
//! ```text
//! "DFWU" | version u8 (=1) | dtype u8 | tensor count u32be
//! per tensor: rank u32be | dims u32be* | payload
//! ```
//!
//! Plain payloads are little-endian f64. Ciphertext payloads are one
//! ciphertext wire string per element (key id, u32be length, magnitude).

use crate::phe::Ciphertext;

use super::{NnError, Tensor};

pub const MAGIC: &[u8; 4] = b"DFWU";
pub const VERSION: u8 = 1;
pub const DTYPE_PLAIN_F64: u8 = 1;
pub const DTYPE_PAILLIER: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherTensor {
    shape: Vec<usize>,
    values: Vec<Ciphertext>,
}

impl CipherTensor {
    pub fn new(shape: Vec<usize>, values: Vec<Ciphertext>) -> Result<Self, NnError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NnError::InvalidShape(format!("{shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NnError::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(CipherTensor { shape, values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[Ciphertext] {
        &self.values
    }
}

/// Model weights as they travel from clients to the lake and aggregator.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Plain(Vec<Tensor>),
    Encrypted(Vec<CipherTensor>),
}

impl Payload {
    pub fn is_encrypted(&self) -> bool {
        matches!(self, Payload::Encrypted(_))
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Payload::Plain(ts) => ts.iter().map(|t| t.shape().to_vec()).collect(),
            Payload::Encrypted(ts) => ts.iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let (dtype, count) = match self {
            Payload::Plain(ts) => (DTYPE_PLAIN_F64, ts.len()),
            Payload::Encrypted(ts) => (DTYPE_PAILLIER, ts.len()),
        };
        out.push(dtype);
        out.extend_from_slice(&(count as u32).to_be_bytes());
        let write_shape = |out: &mut Vec<u8>, shape: &[usize]| {
            out.extend_from_slice(&(shape.len() as u32).to_be_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
        };
        match self {
            Payload::Plain(ts) => {
                for t in ts {
                    write_shape(&mut out, t.shape());
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            Payload::Encrypted(ts) => {
                for t in ts {
                    write_shape(&mut out, t.shape());
                    for c in t.values() {
                        out.extend_from_slice(&c.to_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Blob("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(NnError::Blob(format!("unsupported version {version}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_PLAIN_F64 && dtype != DTYPE_PAILLIER {
            return Err(NnError::Blob(format!("unknown dtype tag {dtype}")));
        }
        let count = r.u32()? as usize;
        let mut plain = Vec::new();
        let mut cipher = Vec::new();
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 16 {
                return Err(NnError::Blob(format!("bad rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| NnError::Blob("tensor too large".into()))?;
            if dtype == DTYPE_PLAIN_F64 {
                let raw = r.take(len.checked_mul(8).ok_or_else(|| NnError::Blob("tensor too large".into()))?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                plain.push(Tensor::new(shape, data)?);
            } else {
                let mut values = Vec::with_capacity(len.min(1 << 20));
                for _ in 0..len {
                    let (c, used) = Ciphertext::from_bytes(&r.bytes[r.pos..])
                        .map_err(|e| NnError::Blob(e.to_string()))?;
                    r.pos += used;
                    values.push(c);
                }
                cipher.push(CipherTensor::new(shape, values)?);
            }
        }
        if r.pos != bytes.len() {
            return Err(NnError::Blob("trailing bytes".into()));
        }
        Ok(if dtype == DTYPE_PLAIN_F64 {
            Payload::Plain(plain)
        } else {
            Payload::Encrypted(cipher)
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Blob("truncated blob".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}
