//! IDX container reader/writer.
//!
//! Header: two zero bytes, a type byte, a dimension count, then one
//! big-endian `u32` extent per dimension. Supported payloads are unsigned
//! bytes (`0x08`, images `0x00000803`, labels `0x00000801`) and the float
//! sidecar `0x00000D03` holding big-endian `f32` pixels for lossless
//! round trips. Files starting with the gzip magic are decompressed
//! transparently; paths ending in `.gz` are written compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const FLOAT_MAGIC: u32 = 0x0000_0D03;

/// Upper bound on the element count accepted from a header.
const MAX_ELEMENTS: u64 = 1 << 32;

/// Decoded IDX payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Idx {
    /// `[N, 1, H, W]` with values in `[0, 1]`.
    Images(Tensor<f32>),
    Labels(Vec<usize>),
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let out = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses an in-memory IDX file. `what` names the source in errors.
pub fn parse_idx(bytes: &[u8], what: &str) -> Result<Idx> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{what}: header")));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    let ndim = match magic {
        IMAGES_MAGIC | FLOAT_MAGIC => 3,
        LABELS_MAGIC => 1,
        found => {
            return Err(Error::BadMagic {
                what: what.to_string(),
                found,
            })
        }
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated(format!("{what}: extents")));
    }
    let dims: Vec<u32> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()))
        .collect();
    let count = dims
        .iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(*d as u64))
        .filter(|c| *c <= MAX_ELEMENTS)
        .ok_or_else(|| Error::ExtentOverflow(dims.clone()))? as usize;
    let width = if magic == FLOAT_MAGIC { 4 } else { 1 };
    let body = &bytes[header..];
    if body.len() < count * width {
        return Err(Error::Truncated(format!(
            "{what}: expected {} payload bytes, found {}",
            count * width,
            body.len()
        )));
    }
    let d: Vec<usize> = dims.iter().map(|d| *d as usize).collect();
    Ok(match magic {
        LABELS_MAGIC => Idx::Labels(body[..count].iter().map(|b| *b as usize).collect()),
        IMAGES_MAGIC => {
            let data = body[..count].iter().map(|b| *b as f32 / 255.0).collect();
            Idx::Images(Tensor::from_vec(&[d[0], 1, d[1], d[2]], data)?)
        }
        _ => {
            let data = body[..count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
                .collect();
            Idx::Images(Tensor::from_vec(&[d[0], 1, d[1], d[2]], data)?)
        }
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Idx> {
    let path = path.as_ref();
    parse_idx(&read_bytes(path)?, &path.display().to_string())
}

pub fn load_images(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    match load_idx(path.as_ref())? {
        Idx::Images(t) => Ok(t),
        Idx::Labels(_) => Err(Error::BadMagic {
            what: format!("{} (expected images)", path.as_ref().display()),
            found: LABELS_MAGIC,
        }),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    match load_idx(path.as_ref())? {
        Idx::Labels(l) => Ok(l),
        Idx::Images(_) => Err(Error::BadMagic {
            what: format!("{} (expected labels)", path.as_ref().display()),
            found: IMAGES_MAGIC,
        }),
    }
}

fn header(magic: u32, dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} does not fit IDX")))?;
        out.extend(d.to_be_bytes());
    }
    Ok(out)
}

fn image_dims(images: &Tensor<f32>) -> Result<[usize; 3]> {
    match images.shape() {
        &[n, 1, h, w] => Ok([n, h, w]),
        s => Err(Error::shape("save_idx", format!("expected [N, 1, H, W], got {s:?}"))),
    }
}

/// Encodes images as bytes, quantizing each value to `round(v * 255)`.
pub fn encode_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = header(IMAGES_MAGIC, &image_dims(images)?)?;
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Encodes images as exact big-endian `f32`.
pub fn encode_float_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = header(FLOAT_MAGIC, &image_dims(images)?)?;
    for v in images.data() {
        out.extend(v.to_be_bytes());
    }
    Ok(out)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = header(LABELS_MAGIC, &[labels.len()])?;
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit a byte")))?);
    }
    Ok(out)
}

pub fn save_images(path: impl AsRef<Path>, images: &Tensor<f32>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_images(images)?)
}

pub fn save_float_images(path: impl AsRef<Path>, images: &Tensor<f32>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_float_images(images)?)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(labels)?)
}
