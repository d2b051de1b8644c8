//! Dataset ingestion: CIFAR-binary files and a synthetic stand-in.
//!
//! Records follow the CIFAR binary layout — 1 label byte then 3072 pixel
//! bytes (red plane, green plane, blue plane, each 32×32 row-major) — whether
//! they come from disk or from [`synthetic_dataset`]. Keeping the raw bytes
//! as the in-memory representation means the synthetic generator, the file
//! loader, and the writer all round-trip through one format.
//!
//! Normalization maps each channel to zero mean / unit variance using
//! statistics of the *train* split only. Train-mode augmentation is a random
//! horizontal flip followed by a 4-pixel pad-and-crop; padding happens in
//! normalized space, so out-of-frame pixels contribute exactly 0.0. All
//! randomness is drawn from a caller-owned `ChaCha8Rng` in a fixed order
//! (flip, row offset, column offset), which is what lets a checkpointed RNG
//! resume augmentation mid-epoch bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use tensor_core::Tensor;

use crate::error::{HarnessError, Result};

/// Image side length; the whole workspace is 32×32.
pub const IMG_DIM: usize = 32;
/// Color channels per image.
pub const CHANNELS: usize = 3;
/// Pixel bytes per image (`3·32·32`).
pub const PIXELS: usize = CHANNELS * IMG_DIM * IMG_DIM;
/// Bytes per record: label + pixels.
pub const RECORD: usize = 1 + PIXELS;
/// Pad width for the random-crop augmentation.
const PAD: usize = 4;

// ---------------------------------------------------------------------------
// Raw storage

/// A set of images in raw CIFAR byte layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    /// `len·3072` pixel bytes, images back to back.
    images: Vec<u8>,
    labels: Vec<u8>,
    classes: usize,
}

impl RawDataset {
    /// Parses concatenated 3073-byte records. Labels must be `< classes`.
    pub fn from_bytes(bytes: &[u8], classes: usize) -> Result<Self> {
        if classes == 0 || classes > 256 {
            return Err(HarnessError::Format(format!("class count {classes} out of range")));
        }
        if bytes.len() % RECORD != 0 {
            return Err(HarnessError::Format(format!(
                "byte length {} is not a multiple of the {RECORD}-byte record",
                bytes.len()
            )));
        }
        let n = bytes.len() / RECORD;
        let mut images = Vec::with_capacity(n * PIXELS);
        let mut labels = Vec::with_capacity(n);
        for rec in bytes.chunks_exact(RECORD) {
            if rec[0] as usize >= classes {
                return Err(HarnessError::Format(format!(
                    "label {} out of range for {classes} classes",
                    rec[0]
                )));
            }
            labels.push(rec[0]);
            images.extend_from_slice(&rec[1..]);
        }
        Ok(RawDataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Pixel bytes of image `i` (R plane, G plane, B plane).
    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Keeps the first `n` records (identity when `n ≥ len`).
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.images.truncate(n * PIXELS);
            self.labels.truncate(n);
        }
    }

    /// Serializes back to concatenated 3073-byte records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }
}

/// Reads one CIFAR-binary file.
pub fn read_cifar_bin(path: &Path, classes: usize) -> Result<RawDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    RawDataset::from_bytes(&bytes, classes)
        .map_err(|e| match e {
            HarnessError::Format(msg) => {
                HarnessError::Format(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
}

/// Writes records in CIFAR binary layout.
pub fn write_cifar_bin(path: &Path, data: &RawDataset) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&data.to_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Deterministic class-conditional Gaussian-blob images.
///
/// Class `c` owns a hue on the color circle; each sample paints a blob of
/// that color (center jittered, σ ≈ 4 px) over a noisy background and
/// quantizes to bytes. Labels cycle `0, 1, …, classes−1` so every prefix of
/// the set is nearly class-balanced. Same `(classes, samples, seed)` →
/// bitwise-identical output.
pub fn synthetic_dataset(classes: usize, samples: usize, seed: u64) -> Result<RawDataset> {
    if classes == 0 || classes > 256 {
        return Err(HarnessError::Format(format!("class count {classes} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(samples * PIXELS);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % classes;
        let theta = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        // Hue → RGB via three phase-shifted cosines; adjacent classes get
        // similar colors, so the task is learnable but not trivial.
        let color = [
            0.5 + 0.5 * theta.cos(),
            0.5 + 0.5 * (theta - 2.0 * std::f64::consts::PI / 3.0).cos(),
            0.5 + 0.5 * (theta + 2.0 * std::f64::consts::PI / 3.0).cos(),
        ];
        let cx = 16.0 + rng.gen_range(-6.0..6.0);
        let cy = 16.0 + rng.gen_range(-6.0..6.0);
        let sigma = rng.gen_range(3.0..5.0);
        let amp = rng.gen_range(0.7..1.0);
        for ch in color {
            for y in 0..IMG_DIM {
                for x in 0..IMG_DIM {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let blob = amp * ch * (-d2 / (2.0 * sigma * sigma)).exp();
                    let noise = rng.gen_range(-1.0..1.0) * 0.08;
                    let v = 0.15 + 0.65 * blob + noise;
                    images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(class as u8);
    }
    Ok(RawDataset { images, labels, classes })
}

// ---------------------------------------------------------------------------
// Normalization and augmentation

/// Per-channel affine normalization fitted on a train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalizer {
    /// Channel mean and population standard deviation of `data`, on the
    /// `[0, 1]` pixel scale. Constant channels get σ = 1 to stay finite.
    pub fn fit(data: &RawDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(HarnessError::Format("cannot fit normalizer on empty split".into()));
        }
        let plane = IMG_DIM * IMG_DIM;
        let count = (data.len() * plane) as f64;
        let mut sum = [0.0f64; CHANNELS];
        let mut sumsq = [0.0f64; CHANNELS];
        for i in 0..data.len() {
            let img = data.image(i);
            for c in 0..CHANNELS {
                for &b in &img[c * plane..(c + 1) * plane] {
                    let v = b as f64 / 255.0;
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
        }
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            mean[c] = sum[c] / count;
            let var = (sumsq[c] / count - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Normalizer { mean, std })
    }

    fn apply(&self, byte: u8, channel: usize) -> f32 {
        ((byte as f64 / 255.0 - self.mean[channel]) / self.std[channel]) as f32
    }
}

/// Normalizes one raw image into `out` (`3·32·32`, channel-major), applying
/// a horizontal flip and a 4-pixel pad-and-crop at offsets `(dy, dx)` in
/// `0..=8`. Offsets `(PAD, PAD)` without flip reproduce the eval path.
fn crop_flip(raw: &[u8], norm: &Normalizer, flip: bool, dy: usize, dx: usize, out: &mut [f32]) {
    let plane = IMG_DIM * IMG_DIM;
    for c in 0..CHANNELS {
        for y in 0..IMG_DIM {
            for x in 0..IMG_DIM {
                // Position in the 40×40 zero-padded source.
                let (sy, sx) = (y + dy, x + dx);
                let v = if (PAD..PAD + IMG_DIM).contains(&sy) && (PAD..PAD + IMG_DIM).contains(&sx)
                {
                    let col = if flip { IMG_DIM - 1 - (sx - PAD) } else { sx - PAD };
                    norm.apply(raw[c * plane + (sy - PAD) * IMG_DIM + col], c)
                } else {
                    0.0
                };
                out[c * plane + y * IMG_DIM + x] = v;
            }
        }
    }
}

/// A normalized minibatch ready for the engine.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Assembles the images at `indices` into an `[N, 3, 32, 32]` tensor.
/// With an RNG, each image is augmented (flip coin, then row/column crop
/// offsets, in that order); without, images are center-cropped as-is.
pub fn assemble_batch(
    data: &RawDataset,
    indices: &[usize],
    norm: &Normalizer,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(HarnessError::Format("empty batch".into()));
    }
    let mut buf = vec![0.0f32; indices.len() * PIXELS];
    let mut labels = Vec::with_capacity(indices.len());
    let mut rng = rng;
    for (slot, &i) in indices.iter().enumerate() {
        if i >= data.len() {
            return Err(HarnessError::Format(format!(
                "index {i} out of range for {} samples",
                data.len()
            )));
        }
        let out = &mut buf[slot * PIXELS..(slot + 1) * PIXELS];
        let (flip, dy, dx) = match rng.as_deref_mut() {
            Some(r) => (r.gen_bool(0.5), r.gen_range(0..=2 * PAD), r.gen_range(0..=2 * PAD)),
            None => (false, PAD, PAD),
        };
        crop_flip(data.image(i), norm, flip, dy, dx, out);
        labels.push(data.label(i));
    }
    let images = Tensor::from_vec(&[indices.len(), CHANNELS, IMG_DIM, IMG_DIM], buf)?;
    Ok(Batch { images, labels })
}

// ---------------------------------------------------------------------------
// Bundles

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    /// Directory of CIFAR-binary files: `data_batch_*.bin` for train,
    /// `test_batch.bin` for test.
    CifarDir { path: String },
    /// Generated blobs; train and test come from disjoint seeds.
    Synthetic { classes: usize, train: usize, test: usize, seed: u64 },
}

/// Train/test splits plus the normalizer fitted on the train split.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: RawDataset,
    pub test: RawDataset,
    pub norm: Normalizer,
}

impl DataBundle {
    pub fn classes(&self) -> usize {
        self.train.classes()
    }
}

/// Loads a source, optionally truncating each split (desk-scale subsets).
pub fn load_dataset(
    source: &DatasetSource,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<DataBundle> {
    let (mut train, mut test) = match source {
        DatasetSource::CifarDir { path } => {
            let dir = Path::new(path);
            let mut batch_files: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .map(|n| n.starts_with("data_batch") && n.ends_with(".bin"))
                        .unwrap_or(false)
                })
                .collect();
            batch_files.sort();
            if batch_files.is_empty() {
                return Err(HarnessError::Format(format!(
                    "no data_batch_*.bin files in {}",
                    dir.display()
                )));
            }
            let mut bytes = Vec::new();
            for f in &batch_files {
                std::fs::File::open(f)?.read_to_end(&mut bytes)?;
            }
            let train = RawDataset::from_bytes(&bytes, 10)?;
            let test = read_cifar_bin(&dir.join("test_batch.bin"), 10)?;
            (train, test)
        }
        DatasetSource::Synthetic { classes, train, test, seed } => (
            synthetic_dataset(*classes, *train, *seed)?,
            // Offset stream keeps test blobs disjoint from train blobs.
            synthetic_dataset(*classes, *test, seed.wrapping_add(0x7465_7374))?,
        ),
    };
    if let Some(n) = train_limit {
        train.truncate(n);
    }
    if let Some(n) = test_limit {
        test.truncate(n);
    }
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Format("empty split after truncation".into()));
    }
    let norm = Normalizer::fit(&train)?;
    Ok(DataBundle { train, test, norm })
}

// ---------------------------------------------------------------------------
