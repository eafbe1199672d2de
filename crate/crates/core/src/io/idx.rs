//! IDX reader/writer (the MNIST container format). Files ending in `.gz`
//! are transparently (de)compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::partition::LabeledDataset;
use crate::scalar::Scalar;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            reason: format!("header ends before byte {}", at + 4),
        })
}

/// Parses one IDX file: returns the dimension sizes and the u8 payload.
pub fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = read_all(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != expected_magic {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected: expected_magic,
            found: magic,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|d| be_u32(&bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < len {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            reason: format!("expected {len} payload bytes, found {}", payload.len()),
        });
    }
    Ok((dims, payload[..len].to_vec()))
}

/// Loads an image/label IDX pair; pixels are scaled to `[0, 1]` and shaped
/// `(N, 1, rows, cols)`.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset<S>> {
    let (idims, pixels) = read_idx(images_path, IMAGES_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let scale = 1.0 / 255.0;
    let data = pixels
        .iter()
        .map(|&p| S::from_f64_lossy(p as f64 * scale))
        .collect();
    let images = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    LabeledDataset::new(images, labels.into_iter().map(usize::from).collect())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut gz = GzEncoder::new(w, Compression::default());
        gz.write_all(bytes).map_err(|e| Error::io(path, e))?;
        gz.finish().map_err(|e| Error::io(path, e))?;
    } else {
        w.write_all(bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes `(N, rows, cols)` u8 images and u8 labels as an IDX pair.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(Error::CountMismatch {
            images: pixels.len() / (rows * cols).max(1),
            labels: n,
        });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    write_bytes(images_path, &img)?;
    write_bytes(labels_path, &lab)
}

/// Quantizes a `[0, 1]` single-channel dataset back to u8 and writes it.
pub fn save_dataset_idx<S: Scalar>(
    ds: &LabeledDataset<S>,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let shape = ds.images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::InvalidArgument(format!(
            "IDX export needs (N, 1, H, W) images, got {shape:?}"
        )));
    }
    let pixels: Vec<u8> = ds
        .images
        .data()
        .iter()
        .map(|v| (v.to_f64_lossless() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let labels = ds
        .labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| Error::LabelOutOfRange {
                label: l,
                n_classes: 256,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_idx(
        images_path,
        labels_path,
        shape[2],
        shape[3],
        &pixels,
        &labels,
    )
}
