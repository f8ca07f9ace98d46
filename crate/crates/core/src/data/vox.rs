//! Portable raw volume format.
//!
//! Layout: the 8-byte magic `VOXRAW01`, a little-endian `u64` metadata length,
//! that many bytes of JSON metadata, then `prod(dims)` little-endian `f32`s.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 8] = b"VOXRAW01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Image,
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl Meta {
    pub fn new(kind: Kind, id: Option<String>, dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self {
            dims,
            spacing,
            dtype: "f32".into(),
            kind,
            id,
        }
    }
}

pub fn encode(meta: &Meta, data: &[f32]) -> Result<Vec<u8>> {
    if meta.dims.iter().product::<usize>() != data.len() {
        return Err(Error::dim(format!("{:?} does not hold {} values", meta.dims, data.len())));
    }
    let json = serde_json::to_vec(meta).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Meta, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(FormatError::Truncated {
            expected: 16,
            actual: bytes.len(),
        }
        .into());
    }
    if &bytes[..8] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "VOXRAW01".into(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        }
        .into());
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let meta_end = 16usize.saturating_add(meta_len);
    if bytes.len() < meta_end {
        return Err(FormatError::Truncated {
            expected: meta_end,
            actual: bytes.len(),
        }
        .into());
    }
    let meta: Meta = serde_json::from_slice(&bytes[16..meta_end]).map_err(|e| FormatError::Malformed {
        what: "vox metadata",
        detail: e.to_string(),
    })?;
    if meta.dtype != "f32" {
        return Err(FormatError::Malformed {
            what: "vox metadata",
            detail: format!("dtype {:?}, only \"f32\" is supported", meta.dtype),
        }
        .into());
    }
    let n: usize = meta.dims.iter().product();
    let need = meta_end + 4 * n;
    if bytes.len() != need {
        return Err(FormatError::Truncated {
            expected: need,
            actual: bytes.len(),
        }
        .into());
    }
    let data = bytes[meta_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((meta, data))
}

pub fn read_file(path: &Path) -> Result<(Meta, Vec<f32>)> {
    decode(&fs::read(path)?)
}

pub fn write_file(path: &Path, meta: &Meta, data: &[f32]) -> Result<()> {
    fs::write(path, encode(meta, data)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_errors() {
        let meta = Meta::new(Kind::Label, Some("c1".into()), [1, 2, 2], [1.0, 2.0, 3.0]);
        let b = encode(&meta, &[0.0, 1.0, 2.0, 1.0]).unwrap();
        let (m, d) = decode(&b).unwrap();
        assert_eq!(m, meta);
        assert_eq!(d, vec![0.0, 1.0, 2.0, 1.0]);
        assert!(matches!(decode(&b[..b.len() - 1]), Err(Error::Format(FormatError::Truncated { .. }))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
        assert!(encode(&meta, &[0.0]).is_err());
    }
}
