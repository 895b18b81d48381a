//! Minimal NIfTI-1 single-file reader and writer (`.nii` / `.nii.gz`).
//!
//! Only the fields needed for volumetry are interpreted: `dim[0..4]`,
//! `pixdim[1..4]`, `datatype`, `scl_slope`/`scl_inter`, `xyzt_units` and
//! `vox_offset`. Header pairs (`ni1`) are rejected.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
const DEFAULT_VOX_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl DataType {
    pub fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
            DataType::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            8 => DataType::I32,
            16 => DataType::F32,
            64 => DataType::F64,
            other => {
                return Err(Error::Format(format!("unsupported NIfTI datatype code {other}")))
            }
        })
    }

    pub fn size(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::I32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DataType::F32 | DataType::F64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// The interpreted subset of a NIfTI-1 header.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub endian: Endian,
    /// Number of dimensions (`dim[0]`), 3 or 4.
    pub ndim: usize,
    /// `[nx, ny, nz, nt]`, with `nt = 1` for 3D volumes.
    pub dims: [usize; 4],
    /// `[dx, dy, dz]` in mm and frame interval in ms (0 when unset).
    pub pixdim: [f64; 4],
    pub datatype: DataType,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub vox_offset: usize,
}

impl NiftiHeader {
    pub fn new(dims: [usize; 4], pixdim: [f64; 4], datatype: DataType) -> Self {
        NiftiHeader {
            endian: Endian::Little,
            ndim: if dims[3] > 1 { 4 } else { 3 },
            dims,
            pixdim,
            datatype,
            scl_slope: 1.0,
            scl_inter: 0.0,
            vox_offset: DEFAULT_VOX_OFFSET,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn frame_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Scale factors per the NIfTI convention: a slope of 0 means "unscaled".
    pub fn scaling(&self) -> Option<(f64, f64)> {
        if self.scl_slope != 0.0 && self.scl_slope.is_finite() && self.scl_inter.is_finite() {
            if self.scl_slope == 1.0 && self.scl_inter == 0.0 {
                None
            } else {
                Some((self.scl_slope, self.scl_inter))
            }
        } else {
            None
        }
    }
}

/// A decoded volume: header plus raw (unscaled) voxel values, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub header: NiftiHeader,
    pub data: Vec<f64>,
}

impl NiftiVolume {
    /// Voxel values of frame `t` (x fastest, then y, then z).
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.header.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Values with `scl_slope`/`scl_inter` applied when present.
    pub fn scaled_data(&self) -> Vec<f64> {
        match self.header.scaling() {
            Some((slope, inter)) => self.data.iter().map(|v| v * slope + inter).collect(),
            None => self.data.clone(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => i32::from_le_bytes(b),
            Endian::Big => i32::from_be_bytes(b),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }

    fn f64(&self, off: usize) -> f64 {
        let b: [u8; 8] = self.bytes[off..off + 8].try_into().unwrap();
        match self.endian {
            Endian::Little => f64::from_le_bytes(b),
            Endian::Big => f64::from_be_bytes(b),
        }
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Spatial and temporal unit multipliers to mm and ms from `xyzt_units`.
fn unit_factors(xyzt_units: u8) -> (f64, f64) {
    let spatial = match xyzt_units & 0x07 {
        1 => 1000.0, // metre
        3 => 0.001,  // micron
        _ => 1.0,    // mm or unknown
    };
    let temporal = match xyzt_units & 0x38 {
        8 => 1000.0, // seconds
        32 => 0.001, // microseconds
        _ => 1.0,    // ms or unknown
    };
    (spatial, temporal)
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "file too small for a NIfTI-1 header ({} bytes)",
            bytes.len()
        )));
    }
    let magic = &bytes[344..348];
    if magic == b"ni1\0" {
        return Err(Error::Format(
            "header/image pair (.hdr/.img) NIfTI files are not supported; convert to single-file .nii".into(),
        ));
    }
    if magic != b"n+1\0" {
        return Err(Error::Format(format!("bad NIfTI-1 magic {:?}", magic)));
    }

    let le = i16::from_le_bytes([bytes[40], bytes[41]]);
    let endian = if (1..=7).contains(&le) {
        Endian::Little
    } else {
        let be = i16::from_be_bytes([bytes[40], bytes[41]]);
        if (1..=7).contains(&be) {
            Endian::Big
        } else {
            return Err(Error::Format(format!("dim[0] out of range ({le})")));
        }
    };
    let r = Reader { bytes, endian };

    let sizeof_hdr = r.i32(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }

    let ndim = r.i16(40) as usize;
    if ndim != 3 && ndim != 4 {
        return Err(Error::Format(format!(
            "expected a 3D or 4D volume, found {ndim} dimensions"
        )));
    }
    let mut dims = [1usize; 4];
    for (i, d) in dims.iter_mut().enumerate().take(ndim) {
        let v = r.i16(42 + 2 * i);
        if v < 1 {
            return Err(Error::Format(format!("dim[{}] = {v} is not positive", i + 1)));
        }
        *d = v as usize;
    }

    let datatype = DataType::from_code(r.i16(70))?;
    let (spatial, temporal) = unit_factors(bytes[123]);
    let mut pixdim = [0.0f64; 4];
    for (i, p) in pixdim.iter_mut().enumerate() {
        let v = r.f32(80 + 4 * i) as f64;
        *p = if i < 3 { v.abs() * spatial } else { v * temporal };
    }
    for (i, p) in pixdim.iter().take(3).enumerate() {
        if !(p.is_finite() && *p > 0.0) {
            return Err(Error::Format(format!("pixdim[{}] = {p} is not positive", i + 1)));
        }
    }

    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("invalid vox_offset {vox_offset}")));
    }

    Ok(NiftiHeader {
        endian,
        ndim,
        dims,
        pixdim,
        datatype,
        scl_slope: r.f32(112) as f64,
        scl_inter: r.f32(116) as f64,
        vox_offset: vox_offset as usize,
    })
}

pub fn decode(bytes: &[u8]) -> Result<NiftiVolume> {
    let owned;
    let bytes = if is_gzip(bytes) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip decode failed: {e}")))?;
        owned = out;
        &owned[..]
    } else {
        bytes
    };

    let header = parse_header(bytes)?;
    let n = header.n_voxels();
    let size = header.datatype.size();
    let start = header.vox_offset;
    let end = start + n * size;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "truncated voxel data: need {end} bytes, file has {}",
            bytes.len()
        )));
    }
    let r = Reader {
        bytes,
        endian: header.endian,
    };
    let data = (0..n)
        .map(|i| {
            let off = start + i * size;
            match header.datatype {
                DataType::U8 => bytes[off] as f64,
                DataType::I16 => r.i16(off) as f64,
                DataType::I32 => r.i32(off) as f64,
                DataType::F32 => r.f32(off) as f64,
                DataType::F64 => r.f64(off),
            }
        })
        .collect();
    Ok(NiftiVolume { header, data })
}

pub fn read(path: impl AsRef<Path>) -> Result<NiftiVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Serializes a little-endian single-file NIfTI-1 image.
pub fn encode(header: &NiftiHeader, data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != header.n_voxels() {
        return Err(Error::InvalidInput(format!(
            "voxel count {} does not match dims {:?}",
            data.len(),
            header.dims
        )));
    }
    for (i, &d) in header.dims.iter().enumerate() {
        if d == 0 || d > i16::MAX as usize {
            return Err(Error::InvalidInput(format!("dim[{}] = {d} not encodable", i + 1)));
        }
    }
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let ndim = if header.ndim == 4 || header.dims[3] > 1 { 4 } else { 3 };
    put_i16(&mut h, 40, ndim as i16);
    for i in 0..4 {
        put_i16(&mut h, 42 + 2 * i, header.dims[i] as i16);
    }
    for i in 4..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, header.datatype.code());
    put_i16(&mut h, 72, (header.datatype.size() * 8) as i16);
    put_f32(&mut h, 76, 1.0); // qfac
    for i in 0..4 {
        put_f32(&mut h, 80 + 4 * i, header.pixdim[i] as f32);
    }
    put_f32(&mut h, 108, DEFAULT_VOX_OFFSET as f32);
    put_f32(&mut h, 112, header.scl_slope as f32);
    put_f32(&mut h, 116, header.scl_inter as f32);
    h[123] = 2 | 16; // mm, ms
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(data.len() * header.datatype.size());
    for &v in data {
        match header.datatype {
            DataType::U8 => out.push(checked_int(v, 0.0, u8::MAX as f64)? as u8),
            DataType::I16 => out.extend_from_slice(
                &(checked_int(v, i16::MIN as f64, i16::MAX as f64)? as i16).to_le_bytes(),
            ),
            DataType::I32 => out.extend_from_slice(
                &(checked_int(v, i32::MIN as f64, i32::MAX as f64)? as i32).to_le_bytes(),
            ),
            DataType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DataType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

fn checked_int(v: f64, lo: f64, hi: f64) -> Result<f64> {
    if v.fract() != 0.0 || v < lo || v > hi {
        return Err(Error::InvalidInput(format!(
            "value {v} not representable in integer datatype"
        )));
    }
    Ok(v)
}

/// Writes a NIfTI-1 file; gzip-compressed when the path ends in `.gz`.
pub fn write(path: impl AsRef<Path>, header: &NiftiHeader, data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let raw = encode(header, data)?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        // mtime in the gzip header is left at zero so output is reproducible
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        raw
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
