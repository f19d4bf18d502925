//! Datasets: loading, per-pixel standardization, augmentation and splits.

mod cifar;
mod idx;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

pub use cifar::{encode_cifar, parse_cifar, CifarRecords, PIXELS_PER_IMAGE, RECORD_BYTES};
pub use idx::{encode_idx_images, encode_idx_labels, inflate, parse_idx_images, parse_idx_labels, IdxImages};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Floor applied to per-pixel standard deviations.
pub const STD_FLOOR: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, C, H, W)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("(N, C, H, W)", images.shape()));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    fn from_bytes(pixels: &[u8], labels: &[u8], shape: [usize; 3], num_classes: usize, name: &str) -> Result<Self> {
        let n = labels.len();
        let images = Tensor::new(
            vec![n, shape[0], shape[1], shape[2]],
            pixels.iter().map(|&b| f32::from(b)).collect(),
        )?;
        Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), num_classes, name)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `(C, H, W)`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Builds a dataset from in-memory IDX image and label files.
pub fn idx_dataset(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let img = parse_idx_images(images)?;
    let lab = parse_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(Error::CountMismatch {
            images: img.count,
            labels: lab.len(),
        });
    }
    Dataset::from_bytes(&img.pixels, &lab, [1, img.rows, img.cols], 10, name)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let name = images.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    idx_dataset(&read(images)?, &read(labels)?, &name)
}

/// Concatenates one or more CIFAR-10 binary batch files.
pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<Dataset> {
    let mut all = CifarRecords::default();
    for p in paths {
        let recs = parse_cifar(&read(p)?)?;
        all.labels.extend(recs.labels);
        all.pixels.extend(recs.pixels);
    }
    Dataset::from_bytes(&all.pixels, &all.labels, [3, 32, 32], 10, "cifar10")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Fashion,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fashion => "fashion",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    /// Loads a split from `dir` or from `dir/<name>`. IDX files may carry a
    /// `.gz` suffix; CIFAR files may sit in `cifar-10-batches-bin`.
    pub fn load(self, dir: &Path, split: Split) -> Result<Dataset> {
        let mut ds = match self {
            DatasetKind::Mnist | DatasetKind::Fashion => {
                let prefix = match split {
                    Split::Train => "train",
                    Split::Test => "t10k",
                };
                let images = self.locate(dir, &[&format!("{prefix}-images-idx3-ubyte")])?;
                let labels = self.locate(dir, &[&format!("{prefix}-labels-idx1-ubyte")])?;
                load_idx(&images, &labels)?
            }
            DatasetKind::Cifar10 => {
                let names: Vec<String> = match split {
                    Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                    Split::Test => vec!["test_batch.bin".into()],
                };
                let paths = names
                    .iter()
                    .map(|n| self.locate(dir, &[n]))
                    .collect::<Result<Vec<_>>>()?;
                load_cifar_binary(&paths)?
            }
        };
        ds.name = format!(
            "{}/{}",
            self.name(),
            match split {
                Split::Train => "train",
                Split::Test => "test",
            }
        );
        Ok(ds)
    }

    fn locate(self, dir: &Path, names: &[&str]) -> Result<PathBuf> {
        let dirs = [
            dir.to_path_buf(),
            dir.join(self.name()),
            dir.join("cifar-10-batches-bin"),
        ];
        for d in &dirs {
            for n in names {
                for candidate in [d.join(n), d.join(format!("{n}.gz"))] {
                    if candidate.is_file() {
                        return Ok(candidate);
                    }
                }
            }
        }
        Err(Error::io(
            dir.join(names[0]),
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
        ))
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion" | "fashion-mnist" => Ok(DatasetKind::Fashion),
            "cifar10" | "cifar" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-position mean and floored standard deviation of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Stats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Stats {
    pub fn from_dataset(train: &Dataset) -> Result<Stats> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per: usize = train.sample_shape().iter().product();
        let n = train.len() as f64;
        let mut sum = vec![0f64; per];
        for i in 0..train.len() {
            for (s, &v) in sum.iter_mut().zip(train.images.sample(i)) {
                *s += f64::from(v);
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0f64; per];
        for i in 0..train.len() {
            for ((s, &v), m) in sq.iter_mut().zip(train.images.sample(i)).zip(&mean) {
                let d = f64::from(v) - m;
                *s += d * d;
            }
        }
        Ok(Stats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: sq.iter().map(|s| ((s / n).sqrt() as f32).max(STD_FLOOR)).collect(),
        })
    }

    fn check(&self, ds: &Dataset) -> Result<usize> {
        let per: usize = ds.sample_shape().iter().product();
        if per != self.mean.len() {
            return Err(Error::shape(format!("samples of {} values", self.mean.len()), ds.images.shape()));
        }
        Ok(per)
    }

    /// `x ← (x − mean) / std` per position.
    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        let per = self.check(ds)?;
        for chunk in ds.images.data_mut().chunks_exact_mut(per) {
            for ((v, m), s) in chunk.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }

    pub fn invert(&self, ds: &mut Dataset) -> Result<()> {
        let per = self.check(ds)?;
        for chunk in ds.images.data_mut().chunks_exact_mut(per) {
            for ((v, m), s) in chunk.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(())
    }
}

/// Standardizes `train` and every dataset in `others` with statistics of
/// `train` alone.
pub fn standardize(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<Stats> {
    let stats = Stats::from_dataset(train)?;
    stats.apply(train)?;
    for ds in others.iter_mut() {
        stats.apply(ds)?;
    }
    Ok(stats)
}

/// Zero padding applied before random cropping.
pub const AUGMENT_PAD: usize = 4;

/// Crops `(C, H, W)` at offset `(dy, dx)` of the image zero-padded by
/// [`AUGMENT_PAD`], optionally mirroring it horizontally.
pub fn crop_flip(image: &[f32], shape: [usize; 3], dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - AUGMENT_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + dx) as isize - AUGMENT_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Random crop after padding plus a horizontal flip with probability 1/2,
/// per image of a `(N, C, H, W)` batch.
pub fn augment(batch: &mut Tensor, rng: &mut Rng) {
    let s = batch.shape();
    let shape = [s[1], s[2], s[3]];
    let per: usize = shape.iter().product();
    for img in batch.data_mut().chunks_exact_mut(per) {
        let dy = rng.gen_range(0..=2 * AUGMENT_PAD);
        let dx = rng.gen_range(0..=2 * AUGMENT_PAD);
        let flip = rng.gen_bool(0.5);
        let out = crop_flip(img, shape, dy, dx, flip);
        img.copy_from_slice(&out);
    }
}

/// Disjoint label-stratified index sets holding fractions `first` and
/// `second` of every class, both sorted ascending.
pub fn split_indices(labels: &[usize], num_classes: usize, first: f64, second: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(first > 0.0 && second > 0.0 && first + second <= 1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "split fractions must be positive with sum <= 1, got {first} and {second}"
        )));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for idx in by_class.iter_mut() {
        idx.shuffle(rng);
        let n = idx.len();
        let na = ((first * n as f64).round() as usize).min(n);
        let nb = ((second * n as f64).round() as usize).min(n - na);
        a.extend_from_slice(&idx[..na]);
        b.extend_from_slice(&idx[na..na + nb]);
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config(format!(
            "split ({first}, {second}) of {} samples leaves a side empty",
            labels.len()
        )));
    }
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

pub fn split(ds: &Dataset, first: f64, second: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(&ds.labels, ds.num_classes, first, second, rng)?;
    Ok((ds.subset(&a), ds.subset(&b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn toy(n: usize) -> Dataset {
        let images = Tensor::from_fn(vec![n, 1, 2, 2], |i| ((i * 37) % 11) as f32);
        Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3, "toy").unwrap()
    }

    #[test]
    fn idx_count_mismatch() {
        let img = encode_idx_images(&IdxImages {
            count: 2,
            rows: 1,
            cols: 1,
            pixels: vec![0, 1],
        });
        let lab = encode_idx_labels(&[0, 1, 2]);
        assert!(matches!(
            idx_dataset(&img, &lab, "x"),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn standardized_train_has_zero_mean_unit_std() {
        let mut train = toy(90);
        let mut test = toy(30);
        for v in test.images.data_mut() {
            *v += 1.0;
        }
        let stats = standardize(&mut train, &mut [&mut test]).unwrap();
        let again = Stats::from_dataset(&train).unwrap();
        for (m, s) in again.mean.iter().zip(&again.std) {
            assert!(m.abs() < 1e-4 && (s - 1.0).abs() < 1e-3);
        }
        let test_stats = Stats::from_dataset(&test).unwrap();
        assert!(test_stats.mean.iter().any(|m| m.abs() > 0.1));
        let mut back = test.clone();
        stats.invert(&mut back).unwrap();
        let orig = toy(30);
        for (a, b) in back.images.data().iter().zip(orig.images.data()) {
            assert!((a - (b + 1.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_pixel_maps_to_zero() {
        let images = Tensor::full(vec![5, 1, 1, 1], 7.0);
        let mut ds = Dataset::new(images, vec![0; 5], 2, "c").unwrap();
        let stats = standardize(&mut ds, &mut []).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR]);
        assert!(ds.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centre_crop_and_double_flip_are_identity() {
        let img: Vec<f32> = (0..2 * 3 * 5).map(|v| v as f32).collect();
        let shape = [2, 3, 5];
        assert_eq!(crop_flip(&img, shape, 4, 4, false), img);
        let once = crop_flip(&img, shape, 4, 4, true);
        assert_ne!(once, img);
        assert_eq!(crop_flip(&once, shape, 4, 4, true), img);
    }

    #[test]
    fn augment_is_seeded() {
        let base = toy(8).images;
        let (mut a, mut b) = (base.clone(), base.clone());
        augment(&mut a, &mut rng_from(3, &[]));
        augment(&mut b, &mut rng_from(3, &[]));
        assert_eq!(a, b);
        assert_eq!(a.shape(), base.shape());
    }

    #[test]
    fn stratified_split_arithmetic() {
        let labels: Vec<usize> = (0..60_000).map(|i| i % 10).collect();
        let (a, b) = split_indices(&labels, 10, 0.9, 0.1, &mut rng_from(1, &[])).unwrap();
        assert_eq!((a.len(), b.len()), (54_000, 6_000));
        for c in 0..10 {
            assert_eq!(b.iter().filter(|&&i| labels[i] == c).count(), 600);
        }
        let (a2, b2) = split_indices(&labels, 10, 0.9, 0.1, &mut rng_from(1, &[])).unwrap();
        assert_eq!((a2, b2.clone()), (a.clone(), b));
        let set: std::collections::HashSet<_> = a.iter().collect();
        assert!(b2.iter().all(|i| !set.contains(i)));
    }

    #[test]
    fn split_rejects_empty_side() {
        let ds = toy(6);
        assert!(split(&ds, 0.99, 0.01, &mut rng_from(0, &[])).is_err());
        assert!(split(&ds, 0.0, 0.5, &mut rng_from(0, &[])).is_err());
    }
}
