//! MNIST-style IDX files: big-endian header, magic `0x00000803` for rank-3
//! `u8` image arrays and `0x00000801` for rank-1 `u8` label arrays.

use std::path::Path;

use super::read_bytes;
use crate::dataset::TileSource;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// One `rows * cols` row-major buffer per image.
    pub pixels: Vec<Vec<u8>>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Image `i` scaled to `[0, 1]` by `v / 255`.
    pub fn matrix(&self, i: usize) -> Matrix {
        let data = self.pixels[i]
            .iter()
            .map(|&v| f64::from(v) / 255.0)
            .collect();
        Matrix::new(self.rows, self.cols, data).expect("nonempty idx image")
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(what, "truncated header"))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    const WHAT: &str = "IDX image file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            WHAT,
            format!("magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(WHAT, "zero image dimension"));
    }
    let body = &bytes[16..];
    let size = rows * cols;
    if body.len() != count * size {
        return Err(Error::format(
            WHAT,
            format!(
                "{} payload bytes, header implies {}",
                body.len(),
                count * size
            ),
        ));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: body.chunks_exact(size).map(<[u8]>::to_vec).collect(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    const WHAT: &str = "IDX label file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            WHAT,
            format!("magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, WHAT)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(
            WHAT,
            format!("{} labels, header says {count}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_idx_images(&read_bytes(path.as_ref())?)
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_bytes(path.as_ref())?)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * images.rows * images.cols);
    out.extend(IMAGES_MAGIC.to_be_bytes());
    out.extend((images.len() as u32).to_be_bytes());
    out.extend((images.rows as u32).to_be_bytes());
    out.extend((images.cols as u32).to_be_bytes());
    for p in &images.pixels {
        out.extend(p);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

/// Pairs an image file with its label file.
pub fn read_tile_source(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<TileSource> {
    let imgs = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    TileSource::new((0..imgs.len()).map(|i| imgs.matrix(i)).collect(), labels)
}
