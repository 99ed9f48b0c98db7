//! CIFAR binary ingestion, synthetic data, augmentation and batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of CIFAR images.
pub const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
/// Zero padding applied before random cropping.
pub const CROP_PAD: usize = 4;

/// One image `[3, H, W]` with values in `[0, 1]`, and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    /// Label bytes preceding the pixels of each record.
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_size(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Subdirectory produced by unpacking the official binary archive.
    pub fn archive_dir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }

    /// Files of a split and the number of records each must hold.
    pub fn files(self, split: Split) -> Vec<(String, usize)> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => {
                (1..=5).map(|i| (format!("data_batch_{i}.bin"), 10_000)).collect()
            }
            (CifarVariant::Cifar10, Split::Test) => vec![("test_batch.bin".into(), 10_000)],
            (CifarVariant::Cifar100, Split::Train) => vec![("train.bin".into(), 50_000)],
            (CifarVariant::Cifar100, Split::Test) => vec![("test.bin".into(), 10_000)],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Dataset choice exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synth,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::Cifar10, DatasetKind::Cifar100, DatasetKind::Synth];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Synth => "synth",
        }
    }

    pub fn cifar(self) -> Option<CifarVariant> {
        match self {
            DatasetKind::Cifar10 => Some(CifarVariant::Cifar10),
            DatasetKind::Cifar100 => Some(CifarVariant::Cifar100),
            DatasetKind::Synth => None,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown dataset '{s}' (expected cifar10, cifar100 or synth)")))
    }
}

/// Decodes a buffer of whole CIFAR records. `path` is only used in errors.
pub fn parse_records(path: &Path, bytes: &[u8], variant: CifarVariant) -> Result<Vec<Example>> {
    let rec = variant.record_size();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        let whole = (bytes.len() / rec).max(1) * rec;
        return Err(Error::CorruptDataset {
            path: path.to_path_buf(),
            expected: whole as u64,
            actual: bytes.len() as u64,
        });
    }
    bytes
        .chunks_exact(rec)
        .map(|r| {
            // CIFAR-100 stores (coarse, fine); the fine label is the class.
            let label = r[variant.label_bytes() - 1] as usize;
            if label >= variant.num_classes() {
                return Err(Error::config(format!(
                    "{}: label {label} out of range for {}",
                    path.display(),
                    variant.as_str()
                )));
            }
            let pixels = r[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(Example {
                image: Tensor::from_parts(vec![3, CIFAR_SIDE, CIFAR_SIDE], pixels),
                label,
            })
        })
        .collect()
}

/// Encodes examples as CIFAR records. Pixels are quantized to `round(255 v)`;
/// CIFAR-100 coarse labels are written as 0.
pub fn encode_records(examples: &[Example], variant: CifarVariant) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(examples.len() * variant.record_size());
    for ex in examples {
        if ex.image.shape() != [3, CIFAR_SIDE, CIFAR_SIDE] || ex.label >= variant.num_classes() {
            return Err(Error::config(format!(
                "cannot encode image {:?} with label {} as {}",
                ex.image.shape(),
                ex.label,
                variant.as_str()
            )));
        }
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(ex.label as u8);
        out.extend(ex.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn write_cifar_file(path: impl AsRef<Path>, examples: &[Example], variant: CifarVariant) -> Result<()> {
    fs::write(path, encode_records(examples, variant)?)?;
    Ok(())
}

pub fn load_cifar_file(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Vec<Example>> {
    let path = path.as_ref();
    parse_records(path, &fs::read(path)?, variant)
}

/// Resolves the directory holding the split files: `dir` itself or its
/// archive subdirectory.
pub fn cifar_root(dir: &Path, variant: CifarVariant) -> PathBuf {
    let nested = dir.join(variant.archive_dir());
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Checks every split file against its exact expected size and returns the
/// total record count without decoding.
pub fn scan_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<usize> {
    let root = cifar_root(dir, variant);
    let mut total = 0;
    for (name, records) in variant.files(split) {
        let path = root.join(name);
        let actual = fs::metadata(&path)?.len();
        let expected = (records * variant.record_size()) as u64;
        if actual != expected {
            return Err(Error::CorruptDataset { path, expected, actual });
        }
        total += records;
    }
    Ok(total)
}

pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<Vec<Example>> {
    scan_cifar(dir, variant, split)?;
    let root = cifar_root(dir, variant);
    let mut out = Vec::new();
    for (name, _) in variant.files(split) {
        out.extend(load_cifar_file(root.join(name), variant)?);
    }
    Ok(out)
}

/// Class-conditional Gaussian-blob images.
///
/// Class `c` gets a per-channel base level from a lattice over `[0.2, 0.8]`
/// (its digits in base `L = ceil(classes^(1/3))`). On top sit a random
/// Gaussian bump of height `0.3 s` and pixel noise of scale `0.1 s`, where `s`
/// is the lattice spacing, so channel means of different classes never
/// overlap. Labels are assigned round-robin, so classes are balanced.
pub fn synth_dataset(num_classes: usize, count: usize, resolution: usize, seed: u64) -> Result<Vec<Example>> {
    if num_classes == 0 || count < num_classes {
        return Err(Error::config(format!(
            "synthetic dataset needs count >= classes >= 1, got {count} examples of {num_classes} classes"
        )));
    }
    if resolution == 0 {
        return Err(Error::config("synthetic resolution must be positive"));
    }
    let levels = (1..).find(|l: &usize| l.pow(3) >= num_classes).unwrap();
    let spacing = if levels > 1 { 0.6 / (levels - 1) as f64 } else { 0.6 };
    let level = |d: usize| if levels > 1 { 0.2 + d as f64 * spacing } else { 0.5 };
    let sigma = resolution as f64 / 4.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % num_classes;
        let base = [
            level(label % levels),
            level(label / levels % levels),
            level(label / (levels * levels)),
        ];
        let cy = rng.random_range(0.0..resolution as f64);
        let cx = rng.random_range(0.0..resolution as f64);
        let mut data = Vec::with_capacity(3 * resolution * resolution);
        for b in base {
            for y in 0..resolution {
                for x in 0..resolution {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let bump = 0.3 * spacing * (-d2 / (2.0 * sigma * sigma)).exp();
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push((b + bump + 0.1 * spacing * noise).clamp(0.0, 1.0) as f32);
                }
            }
        }
        out.push(Example {
            image: Tensor::from_parts(vec![3, resolution, resolution], data),
            label,
        });
    }
    Ok(out)
}

/// Crop at offset `(dy, dx)` of the image zero-padded by [`CROP_PAD`], then an
/// optional horizontal flip. Offsets range over `0..=2 * CROP_PAD`; the
/// centered crop is `(CROP_PAD, CROP_PAD)`.
pub fn crop_flip(ex: &Example, dy: usize, dx: usize, flip: bool) -> Example {
    let s = ex.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = ex.image.data();
    let mut data = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let ox = if flip { w - 1 - x } else { x };
                data[(ch * h + y) * w + ox] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Example {
        image: Tensor::from_parts(s.to_vec(), data),
        label: ex.label,
    }
}

/// Random crop after zero-padding by 4, and a horizontal flip with
/// probability 0.5.
pub fn augment(ex: &Example, rng: &mut impl Rng) -> Example {
    let dy = rng.random_range(0..=2 * CROP_PAD);
    let dx = rng.random_range(0..=2 * CROP_PAD);
    let flip = rng.random_bool(0.5);
    crop_flip(ex, dy, dx, flip)
}

/// Dataset description and the normalization applied to every batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// `cifar10` (3073-byte records), `cifar100` (3074) or `synth`.
    pub layout: String,
}

impl DatasetMeta {
    /// Per-channel population mean and standard deviation of `train`. A
    /// constant channel gets std 1.
    pub fn from_train(name: &str, num_classes: usize, layout: &str, train: &[Example]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::config("cannot compute normalization of an empty dataset"));
        }
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for ex in train {
            let plane = ex.image.numel() / 3;
            for (ch, chunk) in ex.image.data().chunks_exact(plane).enumerate() {
                for &v in chunk {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        let mut mean = [0.0f32; 3];
        let mut std = [0.0f32; 3];
        for ch in 0..3 {
            let m = sum[ch] / count as f64;
            let var = (sq[ch] / count as f64 - m * m).max(0.0);
            mean[ch] = m as f32;
            std[ch] = if var > 0.0 { var.sqrt() as f32 } else { 1.0 };
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            mean,
            std,
            layout: layout.into(),
        })
    }

    pub fn normalize(&self, image: &[f32], out: &mut Vec<f32>) {
        let plane = image.len() / 3;
        for (ch, chunk) in image.chunks_exact(plane).enumerate() {
            out.extend(chunk.iter().map(|&v| (v - self.mean[ch]) / self.std[ch]));
        }
    }

    /// Inverse of [`DatasetMeta::normalize`] for a `[N, 3, H, W]` batch.
    pub fn denormalize(&self, batch: &Tensor<f32>) -> Tensor<f32> {
        let plane: usize = batch.shape()[2..].iter().product();
        let data = batch
            .data()
            .chunks_exact(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let ch = i % 3;
                chunk.iter().map(move |&v| v * self.std[ch] + self.mean[ch])
            })
            .collect();
        Tensor::from_parts(batch.shape().to_vec(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    /// `None` keeps dataset order.
    pub shuffle_seed: Option<u64>,
    /// Selects the permutation and augmentation draws for this epoch.
    pub epoch: usize,
    pub augment: bool,
}

impl BatchOptions {
    /// In-order, unaugmented batches.
    pub fn eval(batch_size: usize) -> Self {
        Self {
            batch_size,
            shuffle_seed: None,
            epoch: 0,
            augment: false,
        }
    }

    pub fn train(batch_size: usize, seed: u64, epoch: usize) -> Self {
        Self {
            batch_size,
            shuffle_seed: Some(seed),
            epoch,
            augment: true,
        }
    }
}

/// Normalized mini-batches over `data`; the last partial batch is kept.
pub struct Batches<'a> {
    data: &'a [Example],
    meta: &'a DatasetMeta,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment_rng: Option<ChaCha8Rng>,
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn batches<'a>(data: &'a [Example], meta: &'a DatasetMeta, opts: BatchOptions) -> Result<Batches<'a>> {
    if data.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let shape = data[0].image.shape();
    if shape.len() != 3 || shape[0] != 3 || data.iter().any(|e| e.image.shape() != shape) {
        return Err(Error::config(format!("examples must share one [3, H, W] shape, first is {shape:?}")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let seed = opts.shuffle_seed.unwrap_or(0);
    if opts.shuffle_seed.is_some() {
        order.shuffle(&mut epoch_rng(seed, 2 * opts.epoch as u64));
    }
    Ok(Batches {
        data,
        meta,
        order,
        pos: 0,
        batch_size: opts.batch_size,
        augment_rng: opts.augment.then(|| epoch_rng(seed, 2 * opts.epoch as u64 + 1)),
    })
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.data[0].image.shape());
        let mut images = Vec::with_capacity(shape.iter().product());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let ex = &self.data[i];
            match self.augment_rng.as_mut() {
                Some(rng) => self.meta.normalize(augment(ex, rng).image.data(), &mut images),
                None => self.meta.normalize(ex.image.data(), &mut images),
            }
            labels.push(ex.label);
        }
        Some(Batch {
            images: Tensor::from_parts(shape, images),
            labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_sizes() {
        assert_eq!(CifarVariant::Cifar10.record_size(), 3073);
        assert_eq!(CifarVariant::Cifar100.record_size(), 3074);
    }

    #[test]
    fn one_white_record() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        let ex = parse_records(Path::new("mem"), &rec, CifarVariant::Cifar10).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].label, 7);
        assert!(ex[0].image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fine_label_used() {
        let mut rec = vec![3u8, 42u8];
        rec.extend(std::iter::repeat_n(0u8, 3072));
        let ex = parse_records(Path::new("mem"), &rec, CifarVariant::Cifar100).unwrap();
        assert_eq!(ex[0].label, 42);
    }

    #[test]
    fn ragged_buffer_is_corrupt() {
        let err = parse_records(Path::new("x.bin"), &[0u8; 3074], CifarVariant::Cifar10).unwrap_err();
        match err {
            Error::CorruptDataset { expected, actual, .. } => {
                assert_eq!((expected, actual), (3073, 3074));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synth_balanced_and_deterministic() {
        let a = synth_dataset(2, 64, 8, 11).unwrap();
        let b = synth_dataset(2, 64, 8, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|e| e.label == 0).count(), 32);
        assert!(synth_dataset(3, 2, 8, 0).is_err());
    }

    #[test]
    fn centered_crop_without_flip_is_identity() {
        let ex = synth_dataset(1, 1, 6, 0).unwrap().remove(0);
        assert_eq!(crop_flip(&ex, CROP_PAD, CROP_PAD, false), ex);
        let flipped = crop_flip(&ex, CROP_PAD, CROP_PAD, true);
        assert_ne!(flipped, ex);
        assert_eq!(crop_flip(&flipped, CROP_PAD, CROP_PAD, true), ex);
    }

    #[test]
    fn batch_sizes_keep_tail() {
        let data = synth_dataset(2, 100, 4, 0).unwrap();
        let meta = DatasetMeta::from_train("synth", 2, "synth", &data).unwrap();
        let sizes: Vec<_> = batches(&data, &meta, BatchOptions::eval(32))
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, [32, 32, 32, 4]);
    }

    #[test]
    fn empty_dataset_rejected() {
        let meta = DatasetMeta {
            name: "x".into(),
            num_classes: 1,
            mean: [0.0; 3],
            std: [1.0; 3],
            layout: "synth".into(),
        };
        assert!(matches!(batches(&[], &meta, BatchOptions::eval(4)), Err(Error::Config(_))));
    }
}
