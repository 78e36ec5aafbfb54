//! IDX files: a big-endian magic, big-endian u32 extents, then raw bytes.

use std::fs;
use std::path::Path;

use super::DataError;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as stored: `count` images of `rows x cols` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn header(bytes: &[u8], path: &Path, magic: u32, extents: usize) -> Result<Vec<usize>, DataError> {
    let truncated = |need: usize| DataError::Truncated {
        path: path.display().to_string(),
        len: bytes.len(),
        need,
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != magic {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected: magic,
            got: word(0),
        });
    }
    let need = 4 + 4 * extents;
    if bytes.len() < need {
        return Err(truncated(need));
    }
    Ok((1..=extents).map(|i| word(i) as usize).collect())
}

fn body<'a>(bytes: &'a [u8], path: &Path, offset: usize, len: usize) -> Result<&'a [u8], DataError> {
    let need = offset + len;
    if bytes.len() < need {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            len: bytes.len(),
            need,
        });
    }
    Ok(&bytes[offset..need])
}

pub fn read_images(path: &Path) -> Result<IdxImages, DataError> {
    let bytes = read(path)?;
    let dims = header(&bytes, path, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = body(&bytes, path, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read(path)?;
    let count = header(&bytes, path, LABELS_MAGIC, 1)?[0];
    Ok(body(&bytes, path, 8, count)?.to_vec())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_images(path: &Path, images: &IdxImages) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for w in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    write(path, &out)
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write(path, &out)
}
