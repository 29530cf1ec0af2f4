//! IDX (MNIST-style) binary format: big-endian magic, dimension sizes, raw
//! unsigned bytes. Pixels scale to [0,1] by /255.

use std::path::Path;

use innlab_core::interference::Image;
use innlab_core::{DatasetHandle, Error, Result, Tensor};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(buf: &[u8], offset: usize, what: &str) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(offset..offset + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::Parse(format!("{what}: truncated at byte {offset}")))?;
    Ok(u32::from_be_bytes(bytes))
}

/// Parses an images-file / labels-file pair into a dataset. Image ids are
/// the record indexes; the class count is the largest label plus one.
pub fn read_idx(images_path: &Path, labels_path: &Path, split: &str) -> Result<DatasetHandle> {
    let img_buf = std::fs::read(images_path)
        .map_err(|e| Error::Parse(format!("{}: {e}", images_path.display())))?;
    let lbl_buf = std::fs::read(labels_path)
        .map_err(|e| Error::Parse(format!("{}: {e}", labels_path.display())))?;

    let magic = be_u32(&img_buf, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse(format!(
            "images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(&img_buf, 4, "images")? as usize;
    let rows = be_u32(&img_buf, 8, "images")? as usize;
    let cols = be_u32(&img_buf, 12, "images")? as usize;
    let expected = 16 + count * rows * cols;
    if img_buf.len() != expected {
        return Err(Error::Parse(format!(
            "images file is {} bytes, header implies {expected}",
            img_buf.len()
        )));
    }

    let magic = be_u32(&lbl_buf, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse(format!(
            "labels magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let lbl_count = be_u32(&lbl_buf, 4, "labels")? as usize;
    if lbl_buf.len() != 8 + lbl_count {
        return Err(Error::Parse(format!(
            "labels file is {} bytes, header implies {}",
            lbl_buf.len(),
            8 + lbl_count
        )));
    }
    if lbl_count != count {
        return Err(Error::Parse(format!(
            "{count} images but {lbl_count} labels"
        )));
    }

    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let px = rows * cols;
    for i in 0..count {
        let bytes = &img_buf[16 + i * px..16 + (i + 1) * px];
        let data: Vec<f32> = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        images.push(Image::new(Tensor::from_vec(vec![1, rows, cols], data)?, i as u64)?);
        labels.push(u32::from(lbl_buf[8 + i]));
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    DatasetHandle::new(images, labels, n_classes, split, "idx")
}

/// Serializes images already quantized to bytes, for fixtures and round
/// trips.
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(Error::Parse(format!(
            "{} pixel bytes for {count}x{rows}x{cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
