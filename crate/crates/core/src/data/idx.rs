//! IDX files: a big-endian header `0x00 0x00 type rank`, `rank` u32
//! dimensions, then the elements. Files ending in `.gz` are gzip streams.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::RealTensor;

pub const TYPE_U8: u8 = 0x08;
pub const TYPE_F32: u8 = 0x0D;

/// Upper bound on the element count of one file (guards against hostile headers).
const MAX_ELEMENTS: u64 = 1 << 34;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxFile {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if !is_gz(path) {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let data = if is_gz(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish()).map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

/// Parses an IDX byte stream; `path` only labels errors.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<IdxFile> {
    let err = |offset: usize, msg: &str| Error::Idx { path: path.to_path_buf(), offset: offset as u64, msg: msg.to_string() };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated header"));
    }
    let (ty, rank) = (bytes[2], bytes[3] as usize);
    if bytes[0] != 0 || bytes[1] != 0 || !(ty == TYPE_U8 || ty == TYPE_F32) || rank == 0 {
        return Err(err(0, "bad magic"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(err(bytes.len(), "truncated header"));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for i in 0..rank {
        let at = 4 + 4 * i;
        let d = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
        count = count.checked_mul(d as u64).filter(|&c| c <= MAX_ELEMENTS).ok_or_else(|| err(at, "dimension overflow"))?;
        dims.push(d as usize);
    }
    let width = if ty == TYPE_U8 { 1 } else { 4 };
    let need = header as u64 + count * width;
    if (bytes.len() as u64) < need {
        return Err(err(bytes.len(), "truncated data"));
    }
    if (bytes.len() as u64) > need {
        return Err(err(need as usize, "trailing bytes after data"));
    }
    let body = &bytes[header..];
    let data = if ty == TYPE_U8 {
        IdxData::U8(body.to_vec())
    } else {
        let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(err(header + 4 * i, "non-finite value"));
        }
        IdxData::F32(values)
    };
    Ok(IdxFile { dims, data })
}

pub fn read_idx(path: &Path) -> Result<IdxFile> {
    parse_idx(&read_bytes(path)?, path)
}

pub fn encode_idx(file: &IdxFile) -> Vec<u8> {
    let ty = match file.data {
        IdxData::U8(_) => TYPE_U8,
        IdxData::F32(_) => TYPE_F32,
    };
    let mut out = vec![0, 0, ty, file.dims.len() as u8];
    for &d in &file.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    match &file.data {
        IdxData::U8(v) => out.extend_from_slice(v),
        IdxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
    }
    out
}

pub fn write_idx(path: &Path, file: &IdxFile) -> Result<()> {
    write_bytes(path, &encode_idx(file))
}

/// Images as `N x C x H x W` (rank-3 files get `C = 1`). Unsigned bytes are
/// scaled by 1/255; float files (`N x D` or image-shaped) are taken as is.
pub fn load_idx_images<T: Scalar>(path: &Path) -> Result<RealTensor<T>> {
    let file = read_idx(path)?;
    let shape = match file.dims.as_slice() {
        &[n, h, w] => vec![n, 1, h, w],
        &[n, d] if matches!(file.data, IdxData::F32(_)) => vec![n, d],
        &[n, c, h, w] => vec![n, c, h, w],
        d => {
            return Err(Error::Idx { path: path.to_path_buf(), offset: 3, msg: format!("unsupported image rank {}", d.len()) })
        }
    };
    let values = match file.data {
        IdxData::U8(v) => v.into_iter().map(|b| T::from_f64_lossy(b as f64 / 255.0)).collect(),
        IdxData::F32(v) => v.into_iter().map(|x| T::from_f64_lossy(x as f64)).collect(),
    };
    RealTensor::new(shape, values)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let file = read_idx(path)?;
    match (file.dims.as_slice(), file.data) {
        (&[_], IdxData::U8(v)) => Ok(v.into_iter().map(usize::from).collect()),
        _ => Err(Error::Idx { path: path.to_path_buf(), offset: 0, msg: "bad magic (expected 0x00000801 label file)".into() }),
    }
}

/// Writes `N x H x W` unsigned-byte images (magic 0x00000803).
pub fn write_idx_images_u8(path: &Path, n: usize, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::Shape(format!("{} pixels for {n}x{h}x{w}", pixels.len())));
    }
    write_idx(path, &IdxFile { dims: vec![n, h, w], data: IdxData::U8(pixels.to_vec()) })
}

/// Writes a real tensor as float IDX with the tensor's shape.
pub fn write_idx_f32<T: Scalar>(path: &Path, t: &RealTensor<T>) -> Result<()> {
    let data = t.values().iter().map(|v| v.to_f64_exact() as f32).collect();
    write_idx(path, &IdxFile { dims: t.shape().to_vec(), data: IdxData::F32(data) })
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Invalid(format!("label {l} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    write_idx(path, &IdxFile { dims: vec![labels.len()], data: IdxData::U8(bytes) })
}
