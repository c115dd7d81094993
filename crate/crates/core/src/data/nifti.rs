//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Files store x fastest; volumes here are `[D, H, W]` = `[x, y, z]` with z
//! fastest, so reading and writing transpose.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{LabelVolume, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC: [u8; 4] = *b"n+1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDtype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl NiftiDtype {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => NiftiDtype::U8,
            4 => NiftiDtype::I16,
            8 => NiftiDtype::I32,
            16 => NiftiDtype::F32,
            64 => NiftiDtype::F64,
            _ => return None,
        })
    }

    pub fn code(self) -> i16 {
        match self {
            NiftiDtype::U8 => 2,
            NiftiDtype::I16 => 4,
            NiftiDtype::I32 => 8,
            NiftiDtype::F32 => 16,
            NiftiDtype::F64 => 64,
        }
    }

    pub fn size(self) -> usize {
        match self {
            NiftiDtype::U8 => 1,
            NiftiDtype::I16 => 2,
            NiftiDtype::I32 | NiftiDtype::F32 => 4,
            NiftiDtype::F64 => 8,
        }
    }
}

/// A decoded NIfTI volume. Values are widened to f64, which is exact for
/// every supported datatype.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub dtype: NiftiDtype,
    pub big_endian: bool,
    pub data: Vec<f64>,
}

impl NiftiVolume {
    pub fn to_f32(&self) -> Volume<f32> {
        Volume { dims: self.dims, data: self.data.iter().map(|&v| v as f32).collect() }
    }
}

/// What to write: images as f32, labels as u8.
pub enum NiftiData<'a> {
    F32(&'a Volume<f32>),
    U8(&'a Volume<u8>),
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::NiftiTruncated { path: path.into(), expected: HEADER_SIZE, found: bytes.len() });
    }
    let found: [u8; 4] = bytes[344..348].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::NiftiBadMagic { path: path.into(), found });
    }
    let dim0_le = LittleEndian::read_i16(&bytes[40..42]);
    let dim0_be = BigEndian::read_i16(&bytes[40..42]);
    if (1..=7).contains(&dim0_le) {
        decode::<LittleEndian>(path, &bytes, false)
    } else if (1..=7).contains(&dim0_be) {
        decode::<BigEndian>(path, &bytes, true)
    } else {
        Err(Error::NiftiHeader { path: path.into(), detail: format!("dim[0] = {dim0_le} is invalid in either byte order") })
    }
}

fn decode<E: ByteOrder>(path: &Path, b: &[u8], big_endian: bool) -> Result<NiftiVolume> {
    let header_err = |detail: String| Error::NiftiHeader { path: path.into(), detail };
    let sizeof_hdr = E::read_i32(&b[0..4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(header_err(format!("sizeof_hdr = {sizeof_hdr}, expected 348")));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = E::read_i16(&b[40 + 2 * i..42 + 2 * i]);
    }
    let code = E::read_i16(&b[70..72]);
    let dtype = NiftiDtype::from_code(code).ok_or_else(|| Error::NiftiUnsupportedDtype { path: path.into(), code })?;
    let bitpix = E::read_i16(&b[72..74]);
    if bitpix as usize != 8 * dtype.size() {
        return Err(header_err(format!("bitpix {bitpix} does not match datatype code {code}")));
    }
    let ndim = dim[0] as usize;
    let mut dims = [1usize; 3];
    for a in 0..ndim {
        let d = dim[a + 1];
        if d < 1 {
            return Err(header_err(format!("dim[{}] = {d} is not positive", a + 1)));
        }
        if a < 3 {
            dims[a] = d as usize;
        } else if d != 1 {
            return Err(header_err(format!("only single 3-d volumes are supported, dim[{}] = {d}", a + 1)));
        }
    }
    let mut spacing = [1f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = E::read_f32(&b[80 + 4 * a..84 + 4 * a]).abs();
        if v.is_finite() && v > 0.0 {
            *s = v;
        }
    }
    let vox_offset = E::read_f32(&b[108..112]);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(header_err(format!("vox_offset {vox_offset} lies inside the header")));
    }
    let offset = vox_offset as usize;
    let n: usize = dims.iter().product();
    let expected = offset + n * dtype.size();
    if b.len() < expected {
        return Err(Error::NiftiTruncated { path: path.into(), expected, found: b.len() });
    }
    let payload = &b[offset..expected];
    let raw: Vec<f64> = match dtype {
        NiftiDtype::U8 => payload.iter().map(|&v| v as f64).collect(),
        NiftiDtype::I16 => payload.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        NiftiDtype::I32 => payload.chunks_exact(4).map(|c| E::read_i32(c) as f64).collect(),
        NiftiDtype::F32 => payload.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
        NiftiDtype::F64 => payload.chunks_exact(8).map(E::read_f64).collect(),
    };
    let slope = E::read_f32(&b[112..116]) as f64;
    let inter = E::read_f32(&b[116..120]) as f64;
    let scaled = slope.is_finite() && slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    let [nx, ny, nz] = dims;
    let mut data = vec![0.0; n];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = raw[x + nx * (y + ny * z)];
                data[(x * ny + y) * nz + z] = if scaled { v * slope + inter } else { v };
            }
        }
    }
    Ok(NiftiVolume { dims, spacing, dtype, big_endian, data })
}

/// Reads an annotation and validates every value against the label set.
pub fn read_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let v = read_nifti(path)?;
    LabelVolume::from_values(v.dims, &v.data)
}

/// Writes a little-endian single-file NIfTI-1; gzip-compressed when the
/// path ends in `.gz`.
pub fn write_nifti(path: impl AsRef<Path>, data: NiftiData<'_>, spacing: [f32; 3]) -> Result<()> {
    let path = path.as_ref();
    let (dims, dtype) = match &data {
        NiftiData::F32(v) => (v.dims, NiftiDtype::F32),
        NiftiData::U8(v) => (v.dims, NiftiDtype::U8),
    };
    if dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(crate::error::input_err!("cannot store a volume of shape {:?} in NIfTI-1", dims));
    }
    let mut h = vec![0u8; DATA_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *d);
    }
    LittleEndian::write_i16(&mut h[70..72], dtype.code());
    LittleEndian::write_i16(&mut h[72..74], 8 * dtype.size() as i16);
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p);
    }
    LittleEndian::write_f32(&mut h[108..112], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    h[123] = 2; // millimetres
    h[344..348].copy_from_slice(&MAGIC);

    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    h.reserve(n * dtype.size());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (x * ny + y) * nz + z;
                match &data {
                    NiftiData::F32(v) => h.extend_from_slice(&v.data[i].to_le_bytes()),
                    NiftiData::U8(v) => h.push(v.data[i]),
                }
            }
        }
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let bytes = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&h).and_then(|_| enc.finish()).map_err(|e| Error::io(path, e))?
    } else {
        h
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
