//! IDX reader for MNIST-style image and label files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Matrix;

use super::Dataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(path, format!("truncated header at offset {offset}")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]` by `/255` and
/// flattening each image. `limit` keeps the first samples in file order.
pub fn mnist_load(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    let magic = read_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad magic {magic:#010x} at offset 0, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_u32(&images, 4, images_path)? as usize;
    let rows = read_u32(&images, 8, images_path)? as usize;
    let cols = read_u32(&images, 12, images_path)? as usize;

    let lmagic = read_u32(&labels, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad magic {lmagic:#010x} at offset 0, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let lcount = read_u32(&labels, 4, labels_path)? as usize;
    if lcount != count {
        return Err(Error::format(
            labels_path,
            format!("label count {lcount} at offset 4 does not match image count {count}"),
        ));
    }

    let dim = rows * cols;
    if dim == 0 || count == 0 {
        return Err(Error::format(images_path, "empty image set"));
    }
    let need = 16 + count * dim;
    if images.len() < need {
        return Err(Error::format(
            images_path,
            format!("payload truncated at offset {}, expected {need} bytes", images.len()),
        ));
    }
    if labels.len() < 8 + count {
        return Err(Error::format(
            labels_path,
            format!(
                "payload truncated at offset {}, expected {} bytes",
                labels.len(),
                8 + count
            ),
        ));
    }

    let n = limit.map_or(count, |l| l.min(count));
    let pixels = images[16..16 + n * dim].iter().map(|&p| f64::from(p) / 255.0).collect();
    let label_bytes = &labels[8..8 + n];
    if let Some(pos) = label_bytes.iter().position(|&l| l > 9) {
        return Err(Error::format(
            labels_path,
            format!("label {} at offset {} is not a digit", label_bytes[pos], 8 + pos),
        ));
    }
    let inputs = Matrix::from_vec(n, dim, pixels)?;
    Dataset::new(
        "mnist",
        inputs,
        label_bytes.iter().map(|&l| usize::from(l)).collect(),
        10,
    )
}
