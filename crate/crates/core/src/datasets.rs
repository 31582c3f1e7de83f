//! CIFAR-100 binary ingestion, the generated shape dataset, and seeded batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stimuli::{load_manifest, ManifestEntry, Split, StimulusClass, StimulusSpec, BLOB_FILE, IMAGE_SIZE};
use crate::tensor::Tensor;

/// Values per 3×32×32 image.
pub const IMAGE_LEN: usize = 3 * IMAGE_SIZE * IMAGE_SIZE;
/// One CIFAR-100 record: coarse label, fine label, 3072 pixel bytes.
pub const CIFAR_RECORD: usize = 2 + IMAGE_LEN;
pub const CIFAR_TRAIN_RECORDS: usize = 50_000;
pub const CIFAR_TEST_RECORDS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
enum Pixels {
    /// Raw bytes, scaled by 1/255 on access.
    Bytes(Vec<u8>),
    Floats(Vec<f32>),
}

/// In-memory images with optional labels and source ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pixels: Pixels,
    labels: Option<Vec<usize>>,
    ids: Vec<usize>,
}

/// A batch of images in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    /// Shape (B, 3, 32, 32).
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub ids: Vec<usize>,
}

impl ImageSet {
    pub fn from_floats(data: Vec<f32>, labels: Option<Vec<usize>>, ids: Vec<usize>) -> Result<Self> {
        let set = Self {
            pixels: Pixels::Floats(data),
            labels,
            ids,
        };
        set.check()?;
        if let Pixels::Floats(d) = &set.pixels {
            if let Some(v) = d.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
            }
        }
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        let values = match &self.pixels {
            Pixels::Bytes(b) => b.len(),
            Pixels::Floats(f) => f.len(),
        };
        if values != self.ids.len() * IMAGE_LEN {
            return Err(Error::Input(format!(
                "{values} pixel values for {} images of {IMAGE_LEN}",
                self.ids.len()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.ids.len() {
                return Err(Error::Input(format!("{} labels for {} images", l.len(), self.ids.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Writes image `i` into `out` (length [`IMAGE_LEN`]).
    pub fn copy_image(&self, i: usize, out: &mut [f32]) {
        let range = i * IMAGE_LEN..(i + 1) * IMAGE_LEN;
        match &self.pixels {
            Pixels::Bytes(b) => {
                for (o, &v) in out.iter_mut().zip(&b[range]) {
                    *o = v as f32 / 255.0;
                }
            }
            Pixels::Floats(f) => out.copy_from_slice(&f[range]),
        }
    }

    pub fn image(&self, i: usize) -> Tensor {
        let mut data = vec![0.0; IMAGE_LEN];
        self.copy_image(i, &mut data);
        Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], data).expect("image size")
    }

    /// Gathers the listed items into one batch.
    pub fn gather(&self, indices: &[usize]) -> ImageBatch {
        let mut data = vec![0.0; indices.len() * IMAGE_LEN];
        for (slot, &i) in data.chunks_exact_mut(IMAGE_LEN).zip(indices) {
            self.copy_image(i, slot);
        }
        ImageBatch {
            images: Tensor::new(vec![indices.len(), 3, IMAGE_SIZE, IMAGE_SIZE], data).expect("batch size"),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// A new set holding the listed items, in order.
    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let pixels = match &self.pixels {
            Pixels::Bytes(b) => {
                Pixels::Bytes(indices.iter().flat_map(|&i| b[i * IMAGE_LEN..(i + 1) * IMAGE_LEN].iter().copied()).collect())
            }
            Pixels::Floats(f) => {
                Pixels::Floats(indices.iter().flat_map(|&i| f[i * IMAGE_LEN..(i + 1) * IMAGE_LEN].iter().copied()).collect())
            }
        };
        ImageSet {
            pixels,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// The first `n` items (or all of them).
    pub fn take(&self, n: usize) -> ImageSet {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Same images with every label replaced.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<ImageSet> {
        self.labels = Some(labels);
        self.check()?;
        Ok(self)
    }
}

/// Reads one CIFAR-100 binary file. When `expected_records` is given the
/// file length must match it exactly.
pub fn load_cifar_file(path: &Path, expected_records: Option<usize>) -> Result<ImageSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let records = bytes.len() / CIFAR_RECORD;
    let expected_bytes = expected_records.map_or(records * CIFAR_RECORD, |n| n * CIFAR_RECORD);
    if bytes.len() != expected_bytes || bytes.is_empty() {
        return Err(Error::Length {
            what: path.display().to_string(),
            expected: expected_bytes.max(CIFAR_RECORD) as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut labels = Vec::with_capacity(records);
    let mut pixels = Vec::with_capacity(records * IMAGE_LEN);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let fine = record[1] as usize;
        if fine >= 100 {
            return Err(Error::Format(format!("{}: fine label {fine} out of range", path.display())));
        }
        labels.push(fine);
        pixels.extend_from_slice(&record[2..]);
    }
    let set = ImageSet {
        pixels: Pixels::Bytes(pixels),
        labels: Some(labels),
        ids: (0..records).collect(),
    };
    set.check()?;
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cifar100 {
    pub train: ImageSet,
    pub test: ImageSet,
}

/// Loads `train.bin` and `test.bin` from a `cifar-100-binary` directory.
pub fn load_cifar100(dir: &Path) -> Result<Cifar100> {
    Ok(Cifar100 {
        train: load_cifar_file(&dir.join("train.bin"), Some(CIFAR_TRAIN_RECORDS))?,
        test: load_cifar_file(&dir.join("test.bin"), Some(CIFAR_TEST_RECORDS))?,
    })
}

/// Iterates over a set in batches; the last batch may be short.
pub struct BatchIter<'a> {
    set: &'a ImageSet,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.set.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Batches in file order, or in a permutation drawn from `seed`.
pub fn batch_iterator(set: &ImageSet, batch_size: usize, seed: u64, shuffle: bool) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        set,
        order,
        batch_size,
        pos: 0,
    })
}

/// Per-epoch shuffle seed derived from a run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64 + 1)
}

/// The generated shape dataset: every image with its spec.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDataset {
    pub entries: Vec<ManifestEntry>,
    images: ImageSet,
}

/// Loads a dataset written by [`crate::stimuli::save_dataset`]; the blob is
/// expected next to the manifest.
pub fn load_shape_dataset(manifest_path: &Path) -> Result<ShapeDataset> {
    let entries = load_manifest(manifest_path)?;
    let blob_path: PathBuf = manifest_path.with_file_name(BLOB_FILE);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(format!("reading {}", blob_path.display()), e))?;
    let expected = (entries.len() * IMAGE_LEN * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            what: blob_path.display().to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = entries.iter().map(|e| e.spec.class.target()).collect();
    let ids = entries.iter().map(|e| e.index).collect();
    let images = ImageSet::from_floats(data, Some(labels), ids)?;
    Ok(ShapeDataset { entries, images })
}

impl ShapeDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn images(&self) -> &ImageSet {
        &self.images
    }

    pub fn indices(&self, split: Option<Split>, class: Option<StimulusClass>) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| split.is_none_or(|s| e.split == s) && class.is_none_or(|c| e.spec.class == c))
            .map(|(i, _)| i)
            .collect()
    }

    /// Images (labelled 0 for square, 1 for inducers) and specs of a filtered view.
    pub fn select(&self, split: Option<Split>, class: Option<StimulusClass>) -> (ImageSet, Vec<StimulusSpec>) {
        let idx = self.indices(split, class);
        let specs = idx.iter().map(|&i| self.entries[i].spec.clone()).collect();
        (self.images.subset(&idx), specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::{generate_dataset, DatasetCounts, MANIFEST_FILE};

    fn fake_cifar(records: usize) -> Vec<u8> {
        (0..records)
            .flat_map(|r| {
                let mut rec = vec![(r % 20) as u8, (r % 100) as u8];
                rec.extend((0..IMAGE_LEN).map(|i| ((i + r) % 256) as u8));
                rec
            })
            .collect()
    }

    #[test]
    fn cifar_bytes_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.bin");
        fs::write(&path, fake_cifar(3)).unwrap();
        let set = load_cifar_file(&path, Some(3)).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.labels().unwrap(), &[0, 1, 2]);
        let img = set.image(0);
        assert_eq!(img.data()[0], 0.0);
        assert_eq!(img.data()[255], 1.0);
    }

    #[test]
    fn wrong_cifar_length_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        fs::write(&path, fake_cifar(2)).unwrap();
        match load_cifar_file(&path, Some(3)) {
            Err(Error::Length { expected, actual, .. }) => {
                assert_eq!(expected, 3 * 3074);
                assert_eq!(actual, 2 * 3074);
            }
            other => panic!("{other:?}"),
        }
        let mut bytes = fake_cifar(2);
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_cifar_file(&path, None), Err(Error::Length { .. })));
    }

    #[test]
    fn batches_cover_the_set_once() {
        let set = ImageSet::from_floats(vec![0.5; 10 * IMAGE_LEN], None, (0..10).collect()).unwrap();
        let sizes: Vec<usize> = batch_iterator(&set, 4, 0, true).unwrap().map(|b| b.ids.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let ids = |seed| -> Vec<usize> { batch_iterator(&set, 3, seed, true).unwrap().flat_map(|b| b.ids).collect() };
        assert_eq!(ids(1), ids(1));
        let mut sorted = ids(1);
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let plain: Vec<usize> = batch_iterator(&set, 3, 1, false).unwrap().flat_map(|b| b.ids).collect();
        assert_eq!(plain, (0..10).collect::<Vec<_>>());
        assert!(batch_iterator(&set, 0, 0, false).is_err());
    }

    #[test]
    fn shape_dataset_round_trip_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let counts = DatasetCounts {
            train_per_class: 2,
            val_per_class: 1,
            test_per_class: 3,
        };
        let entries = generate_dataset(dir.path(), &counts, 3).unwrap();
        let ds = load_shape_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ds.entries, entries);
        for e in &entries {
            let want = crate::stimuli::render_noisy(&e.spec).unwrap().pixels;
            assert_eq!(ds.images().image(e.index), want);
        }
        let (set, specs) = ds.select(Some(Split::Test), Some(StimulusClass::AllIn));
        assert_eq!(set.len(), 3);
        assert!(specs.iter().all(|s| s.class == StimulusClass::AllIn));
        assert_eq!(set.labels().unwrap(), &[1, 1, 1]);
        assert_eq!(ds.indices(Some(Split::Train), None).len(), 4);
    }

    #[test]
    fn truncated_shape_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let counts = DatasetCounts {
            train_per_class: 1,
            val_per_class: 0,
            test_per_class: 0,
        };
        generate_dataset(dir.path(), &counts, 3).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_shape_dataset(&dir.path().join(MANIFEST_FILE)),
            Err(Error::Length { .. })
        ));
    }
}
