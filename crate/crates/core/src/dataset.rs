//! Labeled image collections and deterministic synthetic datasets used for
//! desk-scale experiments and tests.

use crate::error::{Error, Result};
use crate::interference::Image;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// A labeled, fixed-shape image collection. Image ids are stable across
/// subsetting so adversarial sets can refer back to their originals.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub images: Vec<Image>,
    pub labels: Vec<u32>,
    pub n_classes: usize,
    pub split: String,
    pub name: String,
}

impl DatasetHandle {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<u32>,
        n_classes: usize,
        split: &str,
        name: &str,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if n_classes == 0 {
            return Err(Error::Dataset("class count must be positive".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Dataset(format!("label {l} out of range 0..{n_classes}")));
        }
        if let Some(first) = images.first() {
            let shape = first.pixels.shape();
            if let Some(img) = images.iter().find(|img| img.pixels.shape() != shape) {
                return Err(Error::Dataset(format!(
                    "image {} has shape {:?}, expected {:?}",
                    img.id,
                    img.pixels.shape(),
                    shape
                )));
            }
        }
        Ok(DatasetHandle {
            images,
            labels,
            n_classes,
            split: split.to_string(),
            name: name.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shape of every image, `[c,h,w]`.
    pub fn image_shape(&self) -> Result<&[usize]> {
        self.images
            .first()
            .map(|i| i.pixels.shape())
            .ok_or_else(|| Error::Dataset("dataset is empty".into()))
    }

    /// Seeded selection of `count` images without replacement, in original
    /// index order. Ids and labels travel with their images.
    pub fn subset_seeded(&self, count: usize, seed: u64) -> Result<DatasetHandle> {
        if count > self.len() {
            return Err(Error::Dataset(format!(
                "subset of {count} from {} images",
                self.len()
            )));
        }
        let perm = crate::rng::permutation(seed, &[0x7375_6273], self.len());
        let mut picked: Vec<usize> = perm[..count].to_vec();
        picked.sort_unstable();
        let images = picked.iter().map(|&i| self.images[i].clone()).collect();
        let labels = picked.iter().map(|&i| self.labels[i]).collect();
        DatasetHandle::new(images, labels, self.n_classes, &self.split, &self.name)
    }

    /// Label of the image with the given id, if present.
    pub fn label_of_id(&self, id: u64) -> Option<u32> {
        self.images
            .iter()
            .position(|img| img.id == id)
            .map(|i| self.labels[i])
    }
}

/// Folds a string tag into a seed so equal seeds with different split tags
/// produce unrelated streams.
fn fold_tag(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(seed, |s, b| crate::rng::split(s, b as u64))
}

/// 5x7 digit stencils, rendered bold by dilating one pixel right and down.
const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

/// Ten-class digit-glyph dataset: bold stencils with seeded position jitter
/// and light pixel noise, one channel, `size x size`. Classes are balanced
/// round-robin. Fully determined by `(count, size, split, seed)`.
pub fn synthetic_glyphs(count: usize, size: usize, split: &str, seed: u64) -> Result<DatasetHandle> {
    // Dilated glyph box is 6x8; +-2 jitter around the centered offset needs
    // at least a 12-pixel canvas.
    if size < 12 {
        return Err(Error::Dataset(format!("glyph canvas {size} below minimum 12")));
    }
    if count == 0 {
        return Err(Error::Dataset("glyph dataset needs at least one image".into()));
    }
    let base = fold_tag(seed, split);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i % 10) as u32;
        let mut rng = StreamRng::new(base, &[i as u64]);
        let bg = 0.04 + 0.08 * rng.next_f32();
        let fg = 0.85 + 0.14 * rng.next_f32();
        let dy = rng.next_below(5) as isize - 2;
        let dx = rng.next_below(5) as isize - 2;
        let oy = ((size as isize - 8) / 2 + dy) as usize;
        let ox = ((size as isize - 6) / 2 + dx) as usize;

        let mut t = Tensor::full(vec![1, size, size], bg);
        let data = t.data_mut();
        let stencil = &GLYPHS[class as usize];
        for (r, row) in stencil.iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                if ch == b'#' {
                    // Bold stroke: mark the cell plus its right and down
                    // neighbours.
                    for (ry, rx) in [(0, 0), (0, 1), (1, 0)] {
                        let y = oy + r + ry;
                        let x = ox + c + rx;
                        data[y * size + x] = fg;
                    }
                }
            }
        }
        for v in data.iter_mut() {
            *v = (*v + 0.12 * (rng.next_f32() - 0.5)).clamp(0.0, 1.0);
        }
        images.push(Image::new(t, i as u64)?);
        labels.push(class);
    }
    DatasetHandle::new(images, labels, 10, split, "synthetic-glyphs")
}

/// Two-class toy: a bright Gaussian blob in the top-left (class 0) or
/// bottom-right (class 1) quadrant. Linearly separable by construction.
pub fn two_blobs(count: usize, size: usize, split: &str, seed: u64) -> Result<DatasetHandle> {
    if size < 6 {
        return Err(Error::Dataset(format!("blob canvas {size} below minimum 6")));
    }
    if count == 0 {
        return Err(Error::Dataset("blob dataset needs at least one image".into()));
    }
    let base = fold_tag(seed, split);
    let sigma = size as f32 / 6.0;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i % 2) as u32;
        let mut rng = StreamRng::new(base, &[i as u64]);
        let q = size as f32 / 4.0;
        let (cy, cx) = if class == 0 { (q, q) } else { (3.0 * q, 3.0 * q) };
        let cy = cy + rng.next_symmetric(0.5);
        let cx = cx + rng.next_symmetric(0.5);
        let mut t = Tensor::zeros(vec![1, size, size]);
        let data = t.data_mut();
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let v = 0.9 * (-d2 / (2.0 * sigma * sigma)).exp()
                    + 0.05 * rng.next_f32();
                data[y * size + x] = v.clamp(0.0, 1.0);
            }
        }
        images.push(Image::new(t, i as u64)?);
        labels.push(class);
    }
    DatasetHandle::new(images, labels, 2, split, "two-blobs")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_reproducible_and_balanced() {
        let a = synthetic_glyphs(40, 12, "train", 7).unwrap();
        let b = synthetic_glyphs(40, 12, "train", 7).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.pixels.data(), y.pixels.data());
        }
        let mut counts = [0usize; 10];
        for &l in &a.labels {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4), "{counts:?}");
    }

    #[test]
    fn glyph_splits_differ_under_one_seed() {
        let a = synthetic_glyphs(10, 12, "train", 7).unwrap();
        let b = synthetic_glyphs(10, 12, "test", 7).unwrap();
        assert_ne!(a.images[0].pixels.data(), b.images[0].pixels.data());
    }

    #[test]
    fn glyph_pixels_stay_in_unit_range() {
        let d = synthetic_glyphs(50, 14, "train", 3).unwrap();
        for img in &d.images {
            for &v in img.pixels.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn glyph_classes_are_visually_distinct() {
        // Same index modulo jitter/noise: different classes must differ in
        // many pixels, not a handful.
        let d = synthetic_glyphs(10, 12, "train", 0).unwrap();
        for a in 0..10 {
            for b in (a + 1)..10 {
                let pa = d.images[a].pixels.data();
                let pb = d.images[b].pixels.data();
                let differing = pa
                    .iter()
                    .zip(pb)
                    .filter(|(x, y)| (**x - **y).abs() > 0.3)
                    .count();
                // Jitter can partially align similar glyphs (0 vs 8), so this
                // is a floor, not a classifiability proof.
                assert!(differing >= 5, "classes {a}/{b} differ in {differing} px");
            }
        }
    }

    #[test]
    fn handle_rejects_mismatch_and_bad_labels() {
        let d = synthetic_glyphs(4, 12, "train", 0).unwrap();
        assert!(DatasetHandle::new(d.images.clone(), vec![0, 1], 10, "t", "x").is_err());
        assert!(DatasetHandle::new(d.images.clone(), vec![0, 1, 2, 10], 10, "t", "x").is_err());
    }

    #[test]
    fn subset_preserves_ids_and_labels() {
        let d = synthetic_glyphs(30, 12, "train", 1).unwrap();
        let s = d.subset_seeded(10, 99).unwrap();
        assert_eq!(s.len(), 10);
        for (img, &label) in s.images.iter().zip(&s.labels) {
            assert_eq!(d.label_of_id(img.id), Some(label));
        }
        let again = d.subset_seeded(10, 99).unwrap();
        let ids: Vec<u64> = s.images.iter().map(|i| i.id).collect();
        let ids2: Vec<u64> = again.images.iter().map(|i| i.id).collect();
        assert_eq!(ids, ids2);
        assert!(d.subset_seeded(31, 0).is_err());
    }

    #[test]
    fn blobs_put_mass_in_opposite_quadrants() {
        let d = two_blobs(8, 12, "train", 5).unwrap();
        for (img, &label) in d.images.iter().zip(&d.labels) {
            let p = img.pixels.data();
            let half = 6;
            let tl: f32 = (0..half)
                .flat_map(|y| (0..half).map(move |x| (y, x)))
                .map(|(y, x)| p[y * 12 + x])
                .sum();
            let br: f32 = (half..12)
                .flat_map(|y| (half..12).map(move |x| (y, x)))
                .map(|(y, x)| p[y * 12 + x])
                .sum();
            if label == 0 {
                assert!(tl > br, "class 0 image has tl {tl} <= br {br}");
            } else {
                assert!(br > tl, "class 1 image has br {br} <= tl {tl}");
            }
        }
    }
}
