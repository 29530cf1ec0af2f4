//! CIFAR-10 binary batches: each record is 1 label byte followed by 3072
//! channel-planar pixel bytes, giving channels-first [3,32,32] images.

use std::path::Path;

use innlab_core::interference::Image;
use innlab_core::{DatasetHandle, Error, Result, Tensor};

const RECORD: usize = 1 + 3 * 32 * 32;

/// Parses one or more batch files into a single dataset, in file order.
/// Image ids are record indexes across the whole sequence.
pub fn read_cifar_binary(paths: &[impl AsRef<Path>], split: &str) -> Result<DatasetHandle> {
    if paths.is_empty() {
        return Err(Error::Parse("no CIFAR batch files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let buf = std::fs::read(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if buf.len() % RECORD != 0 {
            return Err(Error::Parse(format!(
                "{}: {} bytes is not a whole number of {RECORD}-byte records; truncated at offset {}",
                path.display(),
                buf.len(),
                buf.len() - buf.len() % RECORD
            )));
        }
        for rec in buf.chunks_exact(RECORD) {
            let data: Vec<f32> = rec[1..].iter().map(|&b| f32::from(b) / 255.0).collect();
            let id = images.len() as u64;
            images.push(Image::new(Tensor::from_vec(vec![3, 32, 32], data)?, id)?);
            labels.push(u32::from(rec[0]));
        }
    }
    let n_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    DatasetHandle::new(images, labels, n_classes, split, "cifar")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_parses_label_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat(128u8).take(3072));
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, &rec).unwrap();
        let ds = read_cifar_binary(&[&path], "train").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.n_classes, 8);
        assert_eq!(ds.images[0].pixels.shape(), &[3, 32, 32]);
        let v = ds.images[0].pixels.data()[0];
        assert!((v - 128.0 / 255.0).abs() < 1e-7, "{v}");
    }

    #[test]
    fn truncated_file_names_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![0u8; RECORD];
        bytes.extend_from_slice(&[1, 2, 3]);
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, &bytes).unwrap();
        let err = read_cifar_binary(&[&path], "train").unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
        assert!(err.to_string().contains("offset 3073"), "{err}");
    }

    #[test]
    fn multiple_batches_concatenate_with_stable_ids() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |label: u8| {
            let mut rec = vec![label];
            rec.extend(std::iter::repeat(label).take(3072));
            rec
        };
        let p1 = dir.path().join("b1.bin");
        let p2 = dir.path().join("b2.bin");
        std::fs::write(&p1, mk(1)).unwrap();
        std::fs::write(&p2, mk(4)).unwrap();
        let ds = read_cifar_binary(&[&p1, &p2], "train").unwrap();
        assert_eq!(ds.labels, vec![1, 4]);
        assert_eq!(ds.images[0].id, 0);
        assert_eq!(ds.images[1].id, 1);
    }
}
