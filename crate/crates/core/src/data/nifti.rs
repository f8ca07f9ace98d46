//! Minimal single-file NIfTI-1 (`.nii` / `.nii.gz`) reader and writer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, FormatError, Result};

const HEADER_SIZE: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";
const DEFAULT_VOX_OFFSET: usize = 352;

/// Element type codes accepted by the reader.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8 = 2,
    I16 = 4,
    I32 = 8,
    F32 = 16,
    F64 = 64,
}

impl Datatype {
    fn from_code(code: i16) -> Result<Self, FormatError> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => return Err(FormatError::UnsupportedDatatype(other)),
        })
    }

    fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

/// A decoded image; `dims` and `spacing` in `[z, y, x]` order.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
    /// The raw 348-byte header, kept so outputs can reuse its geometry.
    pub header: Vec<u8>,
    pub gzipped: bool,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

pub fn read_file(path: &Path) -> Result<NiftiImage> {
    let bytes = fs::read(path)?;
    read_bytes(&bytes)
}

/// Decode a NIfTI-1 image, gunzipping first when the gzip magic is present.
pub fn read_bytes(raw: &[u8]) -> Result<NiftiImage> {
    let gzipped = is_gzip(raw);
    let mut buf = Vec::new();
    let bytes: &[u8] = if gzipped {
        GzDecoder::new(raw).read_to_end(&mut buf).map_err(|e| FormatError::Malformed {
            what: "gzip stream",
            detail: e.to_string(),
        })?;
        &buf
    } else {
        raw
    };
    if bytes.len() < HEADER_SIZE {
        return Err(FormatError::Truncated {
            expected: HEADER_SIZE,
            actual: bytes.len(),
        }
        .into());
    }
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        let detail = if i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == HEADER_SIZE as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("sizeof_hdr is {sizeof_hdr}, expected 348")
        };
        return Err(FormatError::Malformed { what: "NIfTI header", detail }.into());
    }
    if &bytes[344..348] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "n+1".into(),
            found: String::from_utf8_lossy(&bytes[344..347]).into_owned(),
        }
        .into());
    }
    let ndim = i16_at(bytes, 40);
    if !(3..=7).contains(&ndim) {
        return Err(FormatError::Malformed {
            what: "NIfTI header",
            detail: format!("dim[0] = {ndim}, expected a 3-d volume"),
        }
        .into());
    }
    let dim: Vec<i16> = (1..=7).map(|i| i16_at(bytes, 40 + 2 * i)).collect();
    if dim[..3].iter().any(|&d| d < 1) || (3..ndim as usize).any(|i| dim[i] > 1) {
        return Err(FormatError::Malformed {
            what: "NIfTI header",
            detail: format!("unsupported dims {:?}", &dim[..ndim as usize]),
        }
        .into());
    }
    let (nx, ny, nz) = (dim[0] as usize, dim[1] as usize, dim[2] as usize);
    let datatype = Datatype::from_code(i16_at(bytes, 70))?;
    let pix: Vec<f64> = (1..=3).map(|i| f64::from(f32_at(bytes, 76 + 4 * i)).abs()).collect();
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(FormatError::Malformed {
            what: "NIfTI header",
            detail: format!("vox_offset {vox_offset}"),
        }
        .into());
    }
    let vox_offset = vox_offset as usize;
    let n = nx * ny * nz;
    let need = vox_offset + n * datatype.size();
    if bytes.len() < need {
        return Err(FormatError::Truncated {
            expected: need,
            actual: bytes.len(),
        }
        .into());
    }
    let slope = f32_at(bytes, 112);
    let inter = f32_at(bytes, 116);
    let payload = &bytes[vox_offset..need];
    let mut data: Vec<f32> = match datatype {
        Datatype::U8 => payload.iter().map(|&b| f32::from(b)).collect(),
        Datatype::I16 => payload
            .chunks_exact(2)
            .map(|c| f32::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
        Datatype::I32 => payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32)
            .collect(),
        Datatype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Datatype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as f32)
            .collect(),
    };
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let spacing = [
        if pix[2] > 0.0 { pix[2] } else { 1.0 },
        if pix[1] > 0.0 { pix[1] } else { 1.0 },
        if pix[0] > 0.0 { pix[0] } else { 1.0 },
    ];
    Ok(NiftiImage {
        dims: [nz, ny, nx],
        spacing,
        data,
        header: bytes[..HEADER_SIZE].to_vec(),
        gzipped,
    })
}

fn blank_header(dims: [usize; 3], spacing: [f64; 3]) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_SIZE];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, dims[2] as i16, dims[1] as i16, dims[0] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    let pix: [f32; 8] = [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pix.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    // xyzt_units: mm
    h[123] = 2;
    h[344..348].copy_from_slice(MAGIC);
    h
}

/// Values to write and their on-disk type.
pub enum Payload<'a> {
    U8(&'a [u8]),
    F32(&'a [f32]),
}

/// Encode an image. With a `template` header (from a previously read file)
/// its geometry and orientation fields are kept and only the type, scaling
/// and offset fields are rewritten.
pub fn encode(dims: [usize; 3], spacing: [f64; 3], payload: Payload, template: Option<&[u8]>) -> Result<Vec<u8>> {
    let n: usize = dims.iter().product();
    let (code, bitpix, body): (i16, i16, Vec<u8>) = match payload {
        Payload::U8(v) => (2, 8, v.to_vec()),
        Payload::F32(v) => (16, 32, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    if body.len() != n * (bitpix as usize / 8) {
        return Err(Error::dim("payload length does not match dims"));
    }
    let mut h = match template {
        Some(t) if t.len() == HEADER_SIZE => {
            let mut h = t.to_vec();
            let stored = [i16_at(&h, 42), i16_at(&h, 44), i16_at(&h, 46)];
            if stored != [dims[2] as i16, dims[1] as i16, dims[0] as i16] {
                return Err(Error::dim("template header dims differ from the payload"));
            }
            h[344..348].copy_from_slice(MAGIC);
            h
        }
        Some(_) => return Err(Error::dim("template header must be 348 bytes")),
        None => blank_header(dims, spacing),
    };
    h[70..72].copy_from_slice(&code.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    h[108..112].copy_from_slice(&(DEFAULT_VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    h[116..120].copy_from_slice(&0.0f32.to_le_bytes());
    let mut out = h;
    out.extend_from_slice(&[0u8; 4]);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Write `bytes` to `path`, gzip-compressed when the name ends in `.gz`.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}
