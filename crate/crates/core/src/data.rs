//! CIFAR-100 binary ingestion, stratified splits, normalization and
//! augmentation.
//!
//! A record is `[coarse u8][fine u8][1024 R][1024 G][1024 B]` with each
//! plane row-major. Only the fine label is kept.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 2;
pub const NUM_CLASSES: usize = 100;
pub const TRAIN_FILE: &str = "train.bin";
pub const TEST_FILE: &str = "test.bin";
pub const DEFAULT_VAL_COUNT: usize = 5000;

/// Undecoded images and fine labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawSplit {
    /// `len * IMAGE_BYTES` bytes, channel-planar per image.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn push(&mut self, image: &[u8], label: u8) {
        assert_eq!(image.len(), IMAGE_BYTES);
        self.images.extend_from_slice(image);
        self.labels.push(label);
    }

    /// Serializes in the binary record layout; the coarse label is written
    /// as `fine / 5`.
    pub fn to_records(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.push(self.labels[i] / 5);
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }
}

pub fn read_cifar_file(path: &Path) -> Result<RawSplit> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let whole = bytes.len() / RECORD_BYTES * RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            offset: whole as u64,
        });
    }
    let mut raw = RawSplit::default();
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[1];
        if label as usize >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange { record: i, label });
        }
        raw.push(&rec[2..], label);
    }
    Ok(raw)
}

pub fn write_cifar_file(path: &Path, raw: &RawSplit) -> Result<()> {
    Ok(fs::write(path, raw.to_records())?)
}

/// Reads `train.bin` and `test.bin` from `dir`.
pub fn load_cifar100(dir: &Path) -> Result<(RawSplit, RawSplit)> {
    Ok((
        read_cifar_file(&dir.join(TRAIN_FILE))?,
        read_cifar_file(&dir.join(TEST_FILE))?,
    ))
}

pub fn write_cifar_dir(dir: &Path, train: &RawSplit, test: &RawSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_cifar_file(&dir.join(TRAIN_FILE), train)?;
    write_cifar_file(&dir.join(TEST_FILE), test)
}

/// Per-channel mean and standard deviation of `x / 255`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelNorm {
    pub fn from_raw(raw: &RawSplit, indices: &[usize]) -> Self {
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for &i in indices {
            let img = raw.image(i);
            for c in 0..3 {
                let (mut s, mut q) = (0u64, 0u64);
                for &b in &img[c * plane..(c + 1) * plane] {
                    s += b as u64;
                    q += (b as u64) * (b as u64);
                }
                sum[c] += s as f64;
                sq[c] += q as f64;
            }
        }
        let n = (indices.len() * plane).max(1) as f64;
        let mut mean = [0.0; 3];
        let mut std = [1.0; 3];
        for c in 0..3 {
            let m = sum[c] / n / 255.0;
            let var = (sq[c] / n / (255.0 * 255.0) - m * m).max(0.0);
            mean[c] = m;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    fn lut(&self) -> [[f32; 256]; 3] {
        let mut t = [[0.0f32; 256]; 3];
        for (c, row) in t.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = ((b as f64 / 255.0 - self.mean[c]) / self.std[c]) as f32;
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Normalized images ready for batching.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    /// `[N, 3, 32, 32]` flattened.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub kind: SplitKind,
    pub fraction: f64,
}

impl DatasetSplit {
    pub fn from_raw(raw: &RawSplit, indices: &[usize], norm: &ChannelNorm, kind: SplitKind, fraction: f64) -> Self {
        let lut = norm.lut();
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut images = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            let img = raw.image(i);
            for (c, table) in lut.iter().enumerate() {
                images.extend(img[c * plane..(c + 1) * plane].iter().map(|&b| table[b as usize]));
            }
        }
        Self {
            images,
            labels: indices.iter().map(|&i| raw.labels[i] as usize).collect(),
            kind,
            fraction,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// Gathers `indices` into a `[B, 3, 32, 32]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            x.extend_from_slice(self.image(i));
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

pub fn batch_tensor<T: Float>(pixels: &[f32], batch: usize) -> Result<Tensor<T>> {
    Tensor::from_vec(
        &[batch, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
        pixels.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// Index lists of a train/val split of the original training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    Ok(())
}

/// Class-stratified split: `val_count / classes` images per class go to
/// validation, then `round(fraction * n_c)` of each class's remainder to
/// training. Each class is shuffled once per seed, so smaller fractions are
/// prefixes of larger ones.
pub fn split_indices(labels: &[u8], val_count: usize, fraction: f64, seed: u64) -> Result<SplitIndices> {
    check_fraction(fraction)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let present = by_class.iter().filter(|c| !c.is_empty()).count().max(1);
    let val_per_class = val_count / present;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in &mut by_class {
        class.shuffle(&mut rng);
        let nv = val_per_class.min(class.len());
        val.extend_from_slice(&class[..nv]);
        let rest = &class[nv..];
        let nt = ((fraction * rest.len() as f64).round() as usize).clamp(rest.len().min(1), rest.len());
        train.extend_from_slice(&rest[..nt]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(SplitIndices { train, val })
}

/// Builds normalized train and val splits. Normalization statistics come
/// from the selected training images.
pub fn make_splits(
    train_raw: &RawSplit,
    val_count: usize,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit, ChannelNorm)> {
    let idx = split_indices(&train_raw.labels, val_count, fraction, seed)?;
    let norm = ChannelNorm::from_raw(train_raw, &idx.train);
    Ok((
        DatasetSplit::from_raw(train_raw, &idx.train, &norm, SplitKind::Train, fraction),
        DatasetSplit::from_raw(train_raw, &idx.val, &norm, SplitKind::Val, 1.0),
        norm,
    ))
}

pub fn test_split(test_raw: &RawSplit, norm: &ChannelNorm) -> DatasetSplit {
    let all: Vec<usize> = (0..test_raw.len()).collect();
    DatasetSplit::from_raw(test_raw, &all, norm, SplitKind::Test, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pad: 4,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Mirrors every plane of one `[3, 32, 32]` image left to right.
pub fn hflip(image: &mut [f32]) {
    for row in image.chunks_exact_mut(IMAGE_SIDE) {
        row.reverse();
    }
}

/// Shifts one image by `(dy, dx)` with zero fill, i.e. a crop of the
/// zero-padded image at offset `(pad + dy, pad + dx)`.
fn shift(image: &mut [f32], dy: isize, dx: isize) {
    if dy == 0 && dx == 0 {
        return;
    }
    let n = IMAGE_SIDE as isize;
    let src = image.to_vec();
    for (c, plane) in image.chunks_exact_mut(IMAGE_SIDE * IMAGE_SIDE).enumerate() {
        let sp = &src[c * IMAGE_SIDE * IMAGE_SIDE..];
        for i in 0..n {
            for j in 0..n {
                let (y, x) = (i + dy, j + dx);
                plane[(i * n + j) as usize] = if (0..n).contains(&y) && (0..n).contains(&x) {
                    sp[(y * n + x) as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Random pad-and-crop plus horizontal flip on a `[B, 3, 32, 32]` batch.
pub fn augment<R: Rng + ?Sized>(batch: &mut [f32], rng: &mut R, cfg: &AugmentConfig) {
    if !cfg.enabled {
        return;
    }
    let p = cfg.pad as isize;
    for image in batch.chunks_exact_mut(IMAGE_BYTES) {
        let dy = rng.gen_range(-p..=p);
        let dx = rng.gen_range(-p..=p);
        shift(image, dy, dx);
        if rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
            hflip(image);
        }
    }
}

/// Shuffled visiting order for one epoch, a function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 0));
    order
}

/// Independent stream per `(seed, epoch, purpose)`.
pub fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | stream);
    rng
}

/// Generates a learnable stand-in with the CIFAR-100 record layout: each
/// class owns a smooth colour template, samples add per-image noise,
/// brightness jitter and small shifts.
pub fn synthetic_cifar(n_train: usize, n_test: usize, seed: u64) -> (RawSplit, RawSplit) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let templates: Vec<Vec<f32>> = (0..NUM_CLASSES)
        .map(|_| {
            let mut t = vec![0.0f32; IMAGE_BYTES];
            for c in 0..3 {
                let base: f32 = rng.gen_range(60.0..196.0);
                let (fy, fx): (f32, f32) = (rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0));
                let (py, px): (f32, f32) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
                let amp: f32 = rng.gen_range(30.0..70.0);
                for i in 0..IMAGE_SIDE {
                    for j in 0..IMAGE_SIDE {
                        let y = i as f32 / IMAGE_SIDE as f32 * 6.28;
                        let x = j as f32 / IMAGE_SIDE as f32 * 6.28;
                        t[c * plane + i * IMAGE_SIDE + j] = base + amp * ((fy * y + py).sin() * (fx * x + px).cos());
                    }
                }
            }
            t
        })
        .collect();
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut raw = RawSplit::default();
        let mut img = vec![0u8; IMAGE_BYTES];
        for k in 0..n {
            let label = (k % NUM_CLASSES) as u8;
            let t = &templates[label as usize];
            let gain: f32 = rng.gen_range(0.8..1.2);
            let (dy, dx) = (rng.gen_range(-2i32..=2), rng.gen_range(-2i32..=2));
            for c in 0..3 {
                for i in 0..IMAGE_SIDE as i32 {
                    for j in 0..IMAGE_SIDE as i32 {
                        let (y, x) = ((i + dy).clamp(0, 31) as usize, (j + dx).clamp(0, 31) as usize);
                        let noise: f32 = rng.gen_range(-40.0..40.0);
                        let v = t[c * plane + y * IMAGE_SIDE + x] * gain + noise;
                        img[c * plane + i as usize * IMAGE_SIDE + j as usize] = v.clamp(0.0, 255.0) as u8;
                    }
                }
            }
            raw.push(&img, label);
        }
        raw
    };
    let train = draw(n_train, &mut rng);
    let test = draw(n_test, &mut rng);
    (train, test)
}

/// Directory holding real data when present, else `None`.
pub fn cifar_dir_if_present(dir: &Path) -> Option<PathBuf> {
    (dir.join(TRAIN_FILE).is_file() && dir.join(TEST_FILE).is_file()).then(|| dir.to_path_buf())
}
