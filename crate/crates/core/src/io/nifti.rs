//! Single-file NIfTI-1 (`n+1`) subset: 3D float32, int16 and uint8 volumes.
//! Only `dim`, `pixdim`, `datatype`, `vox_offset` and the intensity scaling
//! fields are interpreted; orientation matrices are ignored on read and left
//! unset on write.

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeRole};

const HEADER_SIZE: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().expect("4 bytes");
        if self.little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }
}

pub fn parse_nifti(bytes: &[u8], path: &Path) -> Result<Volume> {
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < HEADER_SIZE {
        return Err(bad(format!("{} bytes is shorter than the NIfTI-1 header", bytes.len())));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let little = match (size_le, size_be) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(bad("sizeof_hdr is not 348".into())),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(bad("missing single-file magic \"n+1\"".into()));
    }
    let r = Reader { bytes, little };
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(bad(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = r.i16(42 + 2 * a);
        if v < 1 {
            return Err(bad(format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        if r.i16(42 + 2 * a) > 1 {
            return Err(bad("only 3D volumes are supported".into()));
        }
    }
    let spacing = [0, 1, 2].map(|a| {
        let s = r.f32(80 + 4 * a).abs() as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    let datatype = r.i16(70);
    let offset = r.f32(108).max(HEADER_SIZE as f32) as usize;
    let slope = r.f32(112);
    let inter = r.f32(116);
    let n: usize = dims.iter().product();
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(bad(format!("unsupported datatype {other}"))),
    };
    let body = bytes.get(offset..offset + n * width).ok_or_else(|| {
        bad(format!(
            "voxel data truncated: need {} bytes at offset {offset}",
            n * width
        ))
    })?;
    let raw: Vec<f32> = match datatype {
        DT_UINT8 => body.iter().map(|&b| b as f32).collect(),
        DT_INT16 => body
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if little {
                    i16::from_le_bytes(b)
                } else {
                    i16::from_be_bytes(b)
                }) as f32
            })
            .collect(),
        _ => body
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().expect("4 bytes");
                if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            })
            .collect(),
    };
    let data = if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        raw.into_iter().map(|v| v * slope + inter).collect()
    } else {
        raw
    };
    Volume::new(dims, spacing, VolumeRole::Intensity, data).map_err(|e| bad(e.to_string()))
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    parse_nifti(&read_file(path)?, path)
}

/// Little-endian float32 NIfTI-1 with voxel data at offset 352.
pub fn encode_nifti(v: &Volume) -> Result<Vec<u8>> {
    let d = v.dims();
    if d.iter().any(|&x| x > i16::MAX as usize) {
        return Err(Error::invalid("volume", "extent exceeds the NIfTI-1 limit of 32767"));
    }
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim: [i16; 8] = [3, d[0] as i16, d[1] as i16, d[2] as i16, 1, 1, 1, 1];
    for (i, x) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&x.to_le_bytes());
    }
    h[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    let s = v.spacing();
    let pixdim: [f32; 8] = [1.0, s[0] as f32, s[1] as f32, s[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, x) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&x.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes());
    h[123] = 10; // xyzt_units: mm, s
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(v.len() * 4);
    for x in v.data() {
        h.extend_from_slice(&x.to_le_bytes());
    }
    Ok(h)
}

pub fn write_nifti(path: &Path, v: &Volume) -> Result<()> {
    write_file(path, &encode_nifti(v)?)
}
