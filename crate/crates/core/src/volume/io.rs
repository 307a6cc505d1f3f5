//! Volume and label file formats.
//!
//! Two formats are supported:
//!
//! * **raw**: a little-endian payload (`f32` for intensities, `u8` for labels)
//!   in `<stem>.raw`, described by a sidecar `<stem>.json` header
//!   `{"shape": [d, h, w], "spacing": [sd, sh, sw], "dtype": "f32" | "u8"}`.
//!   Round trips are bit-exact.
//! * **NIfTI-1** single-file images (`.nii`, optionally gzip-compressed as
//!   `.nii.gz`). NIfTI axis 1 is our width axis, axis 3 our depth axis.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid3, LabelMap, Shape3, Spacing, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    F32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub dtype: RawDtype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FileKind {
    Raw,
    Nifti { gzip: bool },
}

fn file_kind(path: &Path) -> Result<FileKind> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(FileKind::Nifti { gzip: true })
    } else if name.ends_with(".nii") {
        Ok(FileKind::Nifti { gzip: false })
    } else if name.ends_with(".raw") || name.ends_with(".json") {
        Ok(FileKind::Raw)
    } else {
        Err(Error::Format(format!(
            "{}: unsupported extension (expected .raw, .json, .nii or .nii.gz)",
            path.display()
        )))
    }
}

/// Returns `(payload path, header path)` for a raw-format file given either member.
pub fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_raw_header(path: &Path) -> Result<RawHeader> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: RawHeader = serde_json::from_str(&text)?;
    Ok(header)
}

fn header_geometry(header: &RawHeader) -> Result<(Shape3, Spacing)> {
    if header.shape.len() != 3 {
        return Err(Error::Format(format!(
            "expected a 3D payload, header declares {} dimensions",
            header.shape.len()
        )));
    }
    if header.spacing.len() != 3 {
        return Err(Error::Format(format!(
            "expected 3 spacing values, got {}",
            header.spacing.len()
        )));
    }
    let shape = Shape3::new(header.shape[0], header.shape[1], header.shape[2]);
    let spacing = Spacing::new([header.spacing[0], header.spacing[1], header.spacing[2]])?;
    Ok((shape, spacing))
}

fn read_raw(path: &Path, expect: RawDtype) -> Result<(Shape3, Spacing, Vec<u8>)> {
    let (payload_path, header_path) = raw_paths(path);
    let header = read_raw_header(&header_path)?;
    if header.dtype != expect {
        return Err(Error::Format(format!(
            "{}: dtype {:?}, expected {:?}",
            header_path.display(),
            header.dtype,
            expect
        )));
    }
    let (shape, spacing) = header_geometry(&header)?;
    let bytes = read_bytes(&payload_path)?;
    let width = match expect {
        RawDtype::F32 => 4,
        RawDtype::U8 => 1,
    };
    if bytes.len() != shape.len() * width {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, header implies {}",
            payload_path.display(),
            bytes.len(),
            shape.len() * width
        )));
    }
    Ok((shape, spacing, bytes))
}

fn write_raw(path: &Path, shape: Shape3, spacing: Spacing, dtype: RawDtype, bytes: &[u8]) -> Result<()> {
    let (payload_path, header_path) = raw_paths(path);
    let header = RawHeader {
        shape: shape.dims().to_vec(),
        spacing: spacing.0.to_vec(),
        dtype,
    };
    write_bytes(&payload_path, bytes)?;
    write_bytes(&header_path, (serde_json::to_string(&header)? + "\n").as_bytes())
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    match file_kind(path)? {
        FileKind::Raw => {
            let (shape, spacing, bytes) = read_raw(path, RawDtype::F32)?;
            Ok(Volume::new(Grid3::from_vec(shape, f32_from_le_bytes(&bytes))?, spacing))
        }
        FileKind::Nifti { gzip } => {
            let img = nifti::read(path, gzip)?;
            Ok(Volume::new(Grid3::from_vec(img.shape, img.values_f32())?, img.spacing))
        }
    }
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    match file_kind(path)? {
        FileKind::Raw => write_raw(
            path,
            v.shape(),
            v.spacing,
            RawDtype::F32,
            &f32_to_le_bytes(v.data.as_slice()),
        ),
        FileKind::Nifti { gzip } => nifti::write(
            path,
            gzip,
            v.shape(),
            v.spacing,
            nifti::Payload::F32(v.data.as_slice()),
        ),
    }
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    match file_kind(path)? {
        FileKind::Raw => {
            let (shape, spacing, bytes) = read_raw(path, RawDtype::U8)?;
            LabelMap::from_raw(shape, &bytes, spacing)
        }
        FileKind::Nifti { gzip } => {
            let img = nifti::read(path, gzip)?;
            let raw = img
                .values_f32()
                .into_iter()
                .map(|v| {
                    if v.fract() == 0.0 && (0.0..=4.0).contains(&v) {
                        Ok(v as u8)
                    } else {
                        Err(Error::Format(format!("label value {v} outside 0..=4")))
                    }
                })
                .collect::<Result<Vec<u8>>>()?;
            LabelMap::from_raw(img.shape, &raw, img.spacing)
        }
    }
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let raw = labels.to_raw();
    match file_kind(path)? {
        FileKind::Raw => write_raw(path, labels.shape(), labels.spacing, RawDtype::U8, &raw),
        FileKind::Nifti { gzip } => nifti::write(
            path,
            gzip,
            labels.shape(),
            labels.spacing,
            nifti::Payload::U8(&raw),
        ),
    }
}

mod nifti {
    use super::*;

    const HEADER_SIZE: usize = 348;
    const VOX_OFFSET: usize = 352;

    const DT_UINT8: i16 = 2;
    const DT_INT16: i16 = 4;
    const DT_INT32: i16 = 8;
    const DT_FLOAT32: i16 = 16;
    const DT_FLOAT64: i16 = 64;
    const DT_INT8: i16 = 256;
    const DT_UINT16: i16 = 512;
    const DT_UINT32: i16 = 768;

    pub enum Payload<'a> {
        F32(&'a [f32]),
        U8(&'a [u8]),
    }

    pub struct Image {
        pub shape: Shape3,
        pub spacing: Spacing,
        values: Vec<f64>,
    }

    impl Image {
        pub fn values_f32(&self) -> Vec<f32> {
            self.values.iter().map(|&v| v as f32).collect()
        }
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        big_endian: bool,
    }

    impl Reader<'_> {
        fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
            let mut a = [0u8; N];
            a.copy_from_slice(&self.bytes[off..off + N]);
            if self.big_endian {
                a.reverse();
            }
            a
        }
        fn i16(&self, off: usize) -> i16 {
            i16::from_le_bytes(self.arr(off))
        }
        fn i32(&self, off: usize) -> i32 {
            i32::from_le_bytes(self.arr(off))
        }
        fn f32(&self, off: usize) -> f32 {
            f32::from_le_bytes(self.arr(off))
        }
        fn f64(&self, off: usize) -> f64 {
            f64::from_le_bytes(self.arr(off))
        }
    }

    pub fn read(path: &Path, gzip: bool) -> Result<Image> {
        let file_bytes = read_bytes(path)?;
        let bytes = if gzip {
            let mut out = Vec::new();
            flate2::read::GzDecoder::new(&file_bytes[..])
                .read_to_end(&mut out)
                .map_err(|e| Error::io(path, e))?;
            out
        } else {
            file_bytes
        };
        parse(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn parse(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Format("file shorter than a NIfTI-1 header".into()));
        }
        let le = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let big_endian = match le {
            348 => false,
            _ if le.swap_bytes() == 348 => true,
            _ => return Err(Error::Format("not a NIfTI-1 file (sizeof_hdr != 348)".into())),
        };
        if &bytes[344..347] != b"n+1" {
            return Err(Error::Format("only single-file NIfTI-1 (n+1) images are supported".into()));
        }
        let r = Reader { bytes, big_endian };
        let ndim = r.i16(40);
        if !(1..=7).contains(&ndim) {
            return Err(Error::Format(format!("invalid dimension count {ndim}")));
        }
        let dim: Vec<usize> = (1..=7).map(|k| r.i16(40 + 2 * k).max(1) as usize).collect();
        let extra: usize = dim[3..ndim as usize].iter().product();
        if ndim > 3 && extra > 1 {
            return Err(Error::Format(format!(
                "expected a 3D payload, got {ndim}D image with {extra} volumes"
            )));
        }
        let shape = Shape3::new(
            if ndim >= 3 { dim[2] } else { 1 },
            if ndim >= 2 { dim[1] } else { 1 },
            dim[0],
        );
        let pix = |k: usize| {
            let p = r.f32(76 + 4 * k).abs() as f64;
            if p > 0.0 && p.is_finite() {
                p
            } else {
                1.0
            }
        };
        let spacing = Spacing::new([pix(3), pix(2), pix(1)])?;
        let datatype = r.i16(70);
        let vox_offset = (r.f32(108) as usize).max(VOX_OFFSET);
        let slope = r.f32(112);
        let inter = r.f32(116);
        let n = shape.len();
        let width = match datatype {
            DT_UINT8 | DT_INT8 => 1,
            DT_INT16 | DT_UINT16 => 2,
            DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
            DT_FLOAT64 => 8,
            other => return Err(Error::Format(format!("unsupported NIfTI datatype {other}"))),
        };
        if bytes.len() < vox_offset + n * width {
            return Err(Error::Format("payload truncated".into()));
        }
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let off = vox_offset + i * width;
            let v = match datatype {
                DT_UINT8 => bytes[off] as f64,
                DT_INT8 => bytes[off] as i8 as f64,
                DT_INT16 => r.i16(off) as f64,
                DT_UINT16 => r.i16(off) as u16 as f64,
                DT_INT32 => r.i32(off) as f64,
                DT_UINT32 => r.i32(off) as u32 as f64,
                DT_FLOAT32 => r.f32(off) as f64,
                _ => r.f64(off),
            };
            values.push(v);
        }
        if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
            for v in &mut values {
                *v = *v * slope as f64 + inter as f64;
            }
        }
        Ok(Image {
            shape,
            spacing,
            values,
        })
    }

    pub fn write(path: &Path, gzip: bool, shape: Shape3, spacing: Spacing, payload: Payload) -> Result<()> {
        let mut h = vec![0u8; VOX_OFFSET];
        let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
        let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
        h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        h[38] = b'r';
        let dims = [3i16, shape.width as i16, shape.height as i16, shape.depth as i16, 1, 1, 1, 1];
        if [shape.width, shape.height, shape.depth].iter().any(|&d| d > i16::MAX as usize) {
            return Err(Error::Shape(format!("{shape} exceeds NIfTI-1 dimension limits")));
        }
        for (k, d) in dims.iter().enumerate() {
            put_i16(&mut h, 40 + 2 * k, *d);
        }
        let (datatype, bitpix) = match payload {
            Payload::F32(_) => (DT_FLOAT32, 32),
            Payload::U8(_) => (DT_UINT8, 8),
        };
        put_i16(&mut h, 70, datatype);
        put_i16(&mut h, 72, bitpix);
        let [sd, sh, sw] = spacing.0;
        let pixdim = [1.0f32, sw as f32, sh as f32, sd as f32, 1.0, 1.0, 1.0, 1.0];
        for (k, p) in pixdim.iter().enumerate() {
            put_f32(&mut h, 76 + 4 * k, *p);
        }
        put_f32(&mut h, 108, VOX_OFFSET as f32);
        put_f32(&mut h, 112, 1.0);
        h[123] = 2; // millimetres
        put_i16(&mut h, 254, 1); // sform_code: scanner
        put_f32(&mut h, 280, sw as f32);
        put_f32(&mut h, 296 + 4, sh as f32);
        put_f32(&mut h, 312 + 8, sd as f32);
        h[344..348].copy_from_slice(b"n+1\0");
        match payload {
            Payload::F32(v) => h.extend(f32_to_le_bytes(v)),
            Payload::U8(v) => h.extend_from_slice(v),
        }
        if gzip {
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
            enc.write_all(&h).map_err(|e| Error::io(path, e))?;
            let out = enc.finish().map_err(|e| Error::io(path, e))?;
            write_bytes(path, &out)
        } else {
            write_bytes(path, &h)
        }
    }
}
