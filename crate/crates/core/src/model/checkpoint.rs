//! Binary checkpoint: `"MCTS"`, version, config digest, step, then
//! `(key, shape, f32 data)` entries in sorted key order. Little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use mctseg_tensor::{Scalar, Tensor};

use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 4] = b"MCTS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_tensors<'a, T: Scalar>(
        digest: [u8; 32],
        step: u64,
        tensors: impl IntoIterator<Item = (&'a String, &'a Tensor<T>)>,
    ) -> Self {
        Self {
            digest,
            step,
            tensors: tensors.into_iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (key, t) in &self.tensors {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionUnsupported {
                path: path.into(),
                version,
            });
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let key = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::KeySetMismatch("non-utf8 key in checkpoint".into()))?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(Error::TruncatedFile { path: path.into() })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::KeySetMismatch(format!("{key}: {e}")))?;
            tensors.insert(key, t);
        }
        Ok(Self { digest, step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).at(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).at(path)?;
        w.flush().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn into_tensors<T: Scalar>(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors.into_iter().map(|(k, t)| (k, t.cast())).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::TruncatedFile { path: self.path.into() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
