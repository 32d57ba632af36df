//! Reader for the big-endian IDX format used by MNIST-style image files.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::InvalidArgument("truncated IDX header".into()))
}

pub fn read_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::InvalidArgument(format!(
            "bad IDX image magic {magic:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(Error::InvalidArgument(format!(
            "IDX image body has {} bytes, header implies {}",
            body.len(),
            count * rows * cols
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::InvalidArgument(format!(
            "bad IDX label magic {magic:#010x}"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::InvalidArgument(format!(
            "IDX label body has {} bytes, header implies {count}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Loads an image/label file pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let img = read_idx_images(&fs::read(images)?)?;
    let lab = read_idx_labels(&fs::read(labels)?)?;
    if img.count != lab.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            img.count,
            lab.len()
        )));
    }
    let features = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = lab.into_iter().map(usize::from).collect();
    Dataset::new(features, img.rows * img.cols, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_file(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IMAGES_MAGIC, count, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    fn labels_file(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn parses_headers_and_bodies() {
        let img = read_idx_images(&images_file(2, 1, 2, &[0, 255, 128, 1])).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2, 1, 2));
        assert_eq!(read_idx_labels(&labels_file(&[3, 7])).unwrap(), vec![3, 7]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(read_idx_images(&labels_file(&[1])).is_err());
        assert!(read_idx_labels(&images_file(1, 1, 1, &[0])).is_err());
        assert!(read_idx_images(&images_file(2, 2, 2, &[0; 7])).is_err());
        assert!(read_idx_labels(&[0, 0]).is_err());
    }

    #[test]
    fn loads_dataset_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        fs::write(&ip, images_file(2, 2, 2, &[0, 255, 0, 255, 255, 0, 255, 0])).unwrap();
        fs::write(&lp, labels_file(&[0, 1])).unwrap();
        let ds = load_idx(&ip, &lp, 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dims(), 4);
        assert_eq!(ds.sample(0).0, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(ds.sample(1).1, 1);
    }
}
