//! Dataset generation and the on-disk layout: `manifest.jsonl` with one spec
//! per line and `images.f32`, the noisy images as little-endian `f32` in
//! (item, channel, row, column) order.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_noisy, sample_spec, SamplingRanges, StimulusClass, StimulusSpec, NOISE_LEVELS};
use crate::error::{Error, Result};
use crate::imageio::{write_png, write_ppm};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BLOB_FILE: &str = "images.f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Classes present in the split. The critical arrangements are test-only.
    pub fn classes(self) -> &'static [StimulusClass] {
        match self {
            Split::Train | Split::Val => &[StimulusClass::Square, StimulusClass::Random],
            Split::Test => &StimulusClass::ALL,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split {s:?}"))),
        }
    }
}

/// Images per class in each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self {
            train_per_class: 5000,
            val_per_class: 1250,
            test_per_class: 1200,
        }
    }
}

impl DatasetCounts {
    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.per_class(split) * split.classes().len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Position of the image in the blob.
    pub index: usize,
    pub split: Split,
    #[serde(flatten)]
    pub spec: StimulusSpec,
}

/// Samples every spec of a dataset, split by split and class by class, from a
/// single seeded stream.
pub fn generate_specs(counts: &DatasetCounts, ranges: &SamplingRanges, seed: u64) -> Vec<ManifestEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for split in Split::ALL {
        for &class in split.classes() {
            for _ in 0..counts.per_class(split) {
                let spec = sample_spec(class, ranges, &mut rng);
                out.push(ManifestEntry {
                    index: out.len(),
                    split,
                    spec,
                });
            }
        }
    }
    out
}

/// Renders every entry and writes manifest plus blob into `dir`.
pub fn save_dataset(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_path = dir.join(BLOB_FILE);
    let open = |p: &PathBuf| {
        fs::File::create(p)
            .map(BufWriter::new)
            .map_err(|e| Error::io(format!("creating {}", p.display()), e))
    };
    let mut manifest = open(&manifest_path)?;
    let mut blob = open(&blob_path)?;
    for (i, entry) in entries.iter().enumerate() {
        if entry.index != i {
            return Err(Error::Input(format!("entry {i} carries index {}", entry.index)));
        }
        if !NOISE_LEVELS.contains(&entry.spec.noise_sigma) {
            return Err(Error::Input(format!("noise sigma {} is not a preset level", entry.spec.noise_sigma)));
        }
        let image = render_noisy(&entry.spec)?;
        serde_json::to_writer(&mut manifest, entry)?;
        let mut bytes = Vec::with_capacity(4 * image.pixels.len());
        for v in image.pixels.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        manifest
            .write_all(b"\n")
            .and_then(|_| blob.write_all(&bytes))
            .map_err(|e| Error::io(format!("writing dataset in {}", dir.display()), e))?;
    }
    manifest
        .flush()
        .and_then(|_| blob.flush())
        .map_err(|e| Error::io(format!("flushing dataset in {}", dir.display()), e))
}

/// Samples, renders and saves a dataset. Returns the manifest entries.
pub fn generate_dataset(dir: &Path, counts: &DatasetCounts, seed: u64) -> Result<Vec<ManifestEntry>> {
    let entries = generate_specs(counts, &SamplingRanges::default(), seed);
    save_dataset(dir, &entries)?;
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if entry.index != out.len() {
            return Err(Error::Format(format!(
                "{}:{}: index {} out of sequence",
                path.display(),
                lineno + 1,
                entry.index
            )));
        }
        out.push(entry);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

/// Writes one numbered image file per entry, e.g. `00042_test_AllIn.png`.
pub fn write_image_files(dir: &Path, entries: &[ManifestEntry], format: ImageFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for entry in entries {
        let image = render_noisy(&entry.spec)?;
        let name = format!("{:05}_{}_{}.{}", entry.index, entry.split, entry.spec.class, format.extension());
        let path = dir.join(name);
        match format {
            ImageFormat::Png => write_png(&path, &image.pixels)?,
            ImageFormat::Ppm => write_ppm(&path, &image.pixels)?,
        }
    }
    Ok(())
}
