//! Tensor archive used for checkpoints and embedding exports.
//!
//! ```text
//! magic     8 bytes  "UNIBRCK\0"
//! version   u32 LE
//! meta_len  u64 LE, followed by meta_len bytes of UTF-8 JSON metadata
//! count     u32 LE
//! count × { name_len u32 LE, name UTF-8, ndim u32 LE, dims u64 LE × ndim,
//!           data f32 LE × prod(dims) }
//! sha256    32 bytes over everything above
//! ```
//!
//! Tensors keep insertion order, so identical contents give identical bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Params, Real};

pub const MAGIC: &[u8; 8] = b"UNIBRCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub version: u32,
    pub metadata: Vec<u8>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Default for Archive {
    fn default() -> Self {
        Self { version: VERSION, metadata: b"{}".to_vec(), tensors: Vec::new() }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::integrity(self.path, "truncated archive"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::integrity(self.path, "length field out of range"))
    }
}

impl Archive {
    pub fn set_metadata<T: Serialize>(&mut self, meta: &T) {
        self.metadata = serde_json::to_vec(meta).expect("metadata serializes");
    }

    pub fn metadata<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        serde_json::from_slice(&self.metadata).map_err(|e| Error::json(path, e))
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), Tensor { shape, data }));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Append every parameter of `m` under `prefix`.
    pub fn push_params<F: Real, M: Params<F>>(&mut self, prefix: &str, m: &M) {
        m.visit(prefix, &mut |name, shape, data| {
            self.push(name, shape.to_vec(), data.iter().map(|v| v.to_f32().expect("finite")).collect());
        });
    }

    /// Overwrite every parameter of `m` from the archive. Missing tensors
    /// and shape disagreements are configuration errors naming the tensor.
    pub fn load_params<F: Real, M: Params<F>>(&self, prefix: &str, m: &mut M) -> Result<()> {
        let mut err = None;
        m.visit_mut(prefix, &mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                None => err = Some(Error::Config(format!("checkpoint has no tensor `{name}`"))),
                Some(t) if t.shape != shape => {
                    err = Some(Error::Config(format!(
                        "tensor `{name}` has shape {:?} in the checkpoint but {:?} under the current config",
                        t.shape, shape
                    )))
                }
                Some(t) => {
                    for (d, &s) in data.iter_mut().zip(&t.data) {
                        *d = F::from_f32(s).expect("representable");
                    }
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.metadata);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parse archive bytes; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::integrity(path, "not a tensor archive (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::integrity(path, "checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len(), path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let meta_len = r.u64().and_then(|v| r.len(v))?;
        let metadata = r.take(meta_len)?.to_vec();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::integrity(path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                let d = r.u64()?;
                shape.push(r.len(d)?);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::integrity(path, "tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor { shape, data }));
        }
        if r.pos != body.len() {
            return Err(Error::integrity(path, "trailing bytes after tensor table"));
        }
        Ok(Self { version, metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized archive.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive {
        let mut a = Archive::default();
        a.set_metadata(&serde_json::json!({"step": 3}));
        a.push("extractor.geometric.local.weight", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]);
        a.push("embedder.mutual.query", vec![1], vec![0.25]);
        a
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        for pos in [0usize, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[pos] ^= 0x40;
            let err = Archive::from_bytes(&b, Path::new("x.ckpt")).unwrap_err();
            assert_eq!(err.exit_code(), 3, "{err}");
        }
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 5], Path::new("x")).is_err());
    }

    #[test]
    fn version_is_checked() {
        let mut a = sample();
        a.version = 99;
        let err = Archive::from_bytes(&a.to_bytes(), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Version { found: 99, .. }));
    }

    proptest! {
        #[test]
        fn round_trip(data in proptest::collection::vec(-1e6f32..1e6, 0..50), name in "[a-z.]{1,20}") {
            let mut a = Archive::default();
            a.push(name, vec![data.len()], data);
            let b = Archive::from_bytes(&a.to_bytes(), Path::new("p")).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
