//! `.mctv` volume files: `"MCTV"`, version `1u32`, dims `3 x u32`, four `f32`
//! modality volumes in ordinal order, then `u8` labels. Little-endian,
//! row-major `(D, H, W)`.

use std::fs;
use std::path::Path;

use mctseg_tensor::Tensor;

use super::VolumeSample;
use crate::error::{Error, IoContext, Result};
use crate::losses::LabelVolume;

const MAGIC: &[u8; 4] = b"MCTV";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 12;

pub fn volume_bytes(s: &VolumeSample) -> Vec<u8> {
    let dims = s.dims();
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(HEADER + 17 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for img in &s.images {
        for &v in img.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(s.labels.data());
    out
}

pub fn parse_volume(bytes: &[u8], id: String, path: &Path) -> Result<VolumeSample> {
    let truncated = || Error::TruncatedFile { path: path.into() };
    if bytes.len() < 4 {
        return Err(truncated());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < HEADER {
        return Err(truncated());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::VersionUnsupported {
            path: path.into(),
            version,
        });
    }
    let dims = [word(8) as usize, word(12) as usize, word(16) as usize];
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(truncated)?;
    let payload = n.checked_mul(17).ok_or_else(truncated)?;
    if bytes.len() - HEADER < payload {
        return Err(truncated());
    }
    let body = &bytes[HEADER..];
    let images = std::array::from_fn(|m| {
        let data = body[m * 4 * n..(m + 1) * 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(&[1, dims[0], dims[1], dims[2]], data).expect("declared dims")
    });
    let labels = LabelVolume::new(dims, body[16 * n..17 * n].to_vec())?;
    VolumeSample::new(id, images, labels)
}

pub fn write_volume(path: &Path, s: &VolumeSample) -> Result<()> {
    fs::write(path, volume_bytes(s)).at(path)
}

/// Reads a volume; the sample id is the file stem.
pub fn read_volume(path: &Path) -> Result<VolumeSample> {
    let bytes = fs::read(path).at(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_volume(&bytes, id, path)
}
