//! Dataset ingestion, augmentation, and batching.
//!
//! Pixels land in `[0, 1]` (scaled by 1/255); no per-channel mean/std
//! normalization is applied — group norm downstream removes first-order
//! statistics. Augmentation is the zero-pad-then-random-crop transform on the
//! train split only.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{GodeError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub struct Dataset<S: Scalar> {
    images: Vec<S>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    pub split: Split,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(
        images: Vec<S>,
        labels: Vec<usize>,
        channels: usize,
        height: usize,
        width: usize,
        split: Split,
    ) -> Result<Self> {
        let per_image = channels * height * width;
        if per_image == 0 || images.len() != labels.len() * per_image {
            return Err(GodeError::Config(format!(
                "dataset size mismatch: {} values for {} labels of {per_image}-value images",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, index: usize) -> &[S] {
        let per = self.channels * self.height * self.width;
        &self.images[index * per..(index + 1) * per]
    }

    /// Gather the given samples into a `[B, C, H, W]` batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("gather shape");
        (t, labels)
    }

    /// First `k` samples after a seeded shuffle, as a new dataset.
    pub fn subset(&self, k: usize, seed: u64) -> Result<Dataset<S>> {
        if k == 0 || k > self.len() {
            return Err(GodeError::Config(format!(
                "subset of {k} from a dataset of {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        order.truncate(k);
        let per = self.channels * self.height * self.width;
        let mut images = Vec::with_capacity(k * per);
        let mut labels = Vec::with_capacity(k);
        for &i in &order {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            images,
            labels,
            self.channels,
            self.height,
            self.width,
            self.split,
        )
    }

    /// Scale back to bytes: the inverse of the 1/255 decode.
    pub fn encode_bytes(&self) -> Vec<u8> {
        self.images
            .iter()
            .map(|v| (v.to_f64() * 255.0).round() as u8)
            .collect()
    }
}

fn open_maybe_gz(dir: &Path, name: &str) -> Result<(PathBuf, Vec<u8>)> {
    let raw = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    let (path, compressed) = if raw.exists() {
        (raw, false)
    } else if gz.exists() {
        (gz, true)
    } else {
        return Err(GodeError::Format {
            file: raw.display().to_string(),
            offset: 0,
            msg: "file not found (also tried .gz)".into(),
        });
    };
    let mut bytes = Vec::new();
    if compressed {
        GzDecoder::new(File::open(&path)?).read_to_end(&mut bytes)?;
    } else {
        File::open(&path)?.read_to_end(&mut bytes)?;
    }
    Ok((path, bytes))
}

fn be_u32(bytes: &[u8], offset: usize, file: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| GodeError::Format {
            file: file.display().to_string(),
            offset: offset as u64,
            msg: "truncated header".into(),
        })
}

/// MNIST in IDX format: big-endian headers, magic 0x803 for images
/// (`[N, 28, 28]` u8) and 0x801 for labels. Accepts raw or gzip files.
pub fn load_mnist<S: Scalar>(dir: &Path, split: Split) -> Result<Dataset<S>> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let (img_path, img) = open_maybe_gz(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let (lbl_path, lbl) = open_maybe_gz(dir, &format!("{prefix}-labels-idx1-ubyte"))?;

    let magic = be_u32(&img, 0, &img_path)?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(GodeError::Format {
            file: img_path.display().to_string(),
            offset: 0,
            msg: format!("bad magic 0x{magic:08x}, expected 0x{MNIST_IMAGE_MAGIC:08x}"),
        });
    }
    let n = be_u32(&img, 4, &img_path)? as usize;
    let rows = be_u32(&img, 8, &img_path)? as usize;
    let cols = be_u32(&img, 12, &img_path)? as usize;
    let expected = 16 + n * rows * cols;
    if img.len() != expected {
        return Err(GodeError::Format {
            file: img_path.display().to_string(),
            offset: img.len().min(expected) as u64,
            msg: format!("file is {} bytes, header implies {expected}", img.len()),
        });
    }

    let lmagic = be_u32(&lbl, 0, &lbl_path)?;
    if lmagic != MNIST_LABEL_MAGIC {
        return Err(GodeError::Format {
            file: lbl_path.display().to_string(),
            offset: 0,
            msg: format!("bad magic 0x{lmagic:08x}, expected 0x{MNIST_LABEL_MAGIC:08x}"),
        });
    }
    let ln = be_u32(&lbl, 4, &lbl_path)? as usize;
    if ln != n {
        return Err(GodeError::Format {
            file: lbl_path.display().to_string(),
            offset: 4,
            msg: format!("{ln} labels for {n} images"),
        });
    }
    if lbl.len() != 8 + ln {
        return Err(GodeError::Format {
            file: lbl_path.display().to_string(),
            offset: lbl.len().min(8 + ln) as u64,
            msg: format!("file is {} bytes, header implies {}", lbl.len(), 8 + ln),
        });
    }

    let scale = 1.0 / 255.0;
    let images: Vec<S> = img[16..]
        .iter()
        .map(|&b| S::from_f64(b as f64 * scale))
        .collect();
    let labels: Vec<usize> = lbl[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, 1, rows, cols, split)
}

/// CIFAR-10 binary batches: each record is one label byte followed by 3072
/// pixel bytes (32x32 red plane, then green, then blue).
pub fn load_cifar10<S: Scalar>(dir: &Path, split: Split) -> Result<Dataset<S>> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(&name);
        let mut bytes = Vec::new();
        File::open(&path)
            .map_err(|e| GodeError::Format {
                file: path.display().to_string(),
                offset: 0,
                msg: e.to_string(),
            })?
            .read_to_end(&mut bytes)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(GodeError::Format {
                file: path.display().to_string(),
                offset: bytes.len() as u64,
                msg: format!(
                    "file is {} bytes, not a multiple of the {CIFAR_RECORD_LEN}-byte record",
                    bytes.len()
                ),
            });
        }
        let scale = 1.0 / 255.0;
        for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            let label = record[0] as usize;
            if label > 9 {
                return Err(GodeError::Format {
                    file: path.display().to_string(),
                    offset: 0,
                    msg: format!("label byte {label} out of range"),
                });
            }
            labels.push(label);
            images.extend(record[1..].iter().map(|&b| S::from_f64(b as f64 * scale)));
        }
    }
    Dataset::new(images, labels, 3, 32, 32, split)
}

/// Zero-pad each border by `pad`, crop back to the original size at the given
/// per-image offsets (each in `0..=2*pad`).
pub fn crop_with_offsets<S: Scalar>(
    images: &Tensor<S>,
    pad: usize,
    offsets: &[(usize, usize)],
) -> Result<Tensor<S>> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 {
        return Err(GodeError::ShapeMismatch {
            op: "random_crop",
            lhs: shape,
            rhs: vec![0, 0, 0, 0],
        });
    }
    if pad == 0 {
        return Ok(images.clone());
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    debug_assert_eq!(offsets.len(), n);
    let src = images.data();
    let mut out = vec![S::ZERO; src.len()];
    for i in 0..n {
        let (dy, dx) = offsets[i];
        for ch in 0..c {
            let splane = &src[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dplane = &mut out[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for y in 0..h {
                // destination row y reads padded row y+dy, i.e. source row y+dy-pad
                let sy = (y + dy) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue; // stays zero
                }
                let srow = &splane[(sy as usize) * w..(sy as usize + 1) * w];
                let drow = &mut dplane[y * w..(y + 1) * w];
                for (x, d) in drow.iter_mut().enumerate() {
                    let sx = (x + dx) as isize - pad as isize;
                    if sx >= 0 && sx < w as isize {
                        *d = srow[sx as usize];
                    }
                }
            }
        }
    }
    drop(src);
    Tensor::from_vec(shape, out)
}

/// Random crop with padding: uniform offset per image, deterministic under
/// `seed`. Identity when `pad == 0`.
pub fn random_crop<S: Scalar>(images: &Tensor<S>, pad: usize, seed: u64) -> Result<Tensor<S>> {
    if pad == 0 {
        return Ok(images.clone());
    }
    let n = images.shape()[0];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let offsets: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad)))
        .collect();
    crop_with_offsets(images, pad, &offsets)
}

#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// Shuffle seed; `None` keeps dataset order (evaluation).
    pub seed: Option<u64>,
    pub drop_last: bool,
    /// Crop padding applied to train-split batches; 0 disables.
    pub augment_pad: usize,
}

impl BatchPlan {
    pub fn eval(batch_size: usize) -> Self {
        BatchPlan {
            batch_size,
            seed: None,
            drop_last: false,
            augment_pad: 0,
        }
    }
}

/// Deterministic epoch of batches: a seeded permutation visits every index
/// exactly once (before any `drop_last` truncation); cropping is applied only
/// on the train split.
pub fn batches<'a, S: Scalar>(ds: &'a Dataset<S>, plan: &BatchPlan) -> Result<BatchIter<'a, S>> {
    if ds.is_empty() {
        return Err(GodeError::Config("cannot batch an empty dataset".into()));
    }
    if plan.batch_size == 0 {
        return Err(GodeError::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = plan.seed {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    Ok(BatchIter {
        ds,
        order,
        pos: 0,
        batch_size: plan.batch_size,
        drop_last: plan.drop_last,
        augment: ds.split == Split::Train && plan.augment_pad > 0,
        pad: plan.augment_pad,
        crop_rng: ChaCha12Rng::seed_from_u64(plan.seed.unwrap_or(0) ^ 0x9e37_79b9_7f4a_7c15),
    })
}

pub struct BatchIter<'a, S: Scalar> {
    ds: &'a Dataset<S>,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    drop_last: bool,
    augment: bool,
    pad: usize,
    crop_rng: ChaCha12Rng,
}

impl<S: Scalar> Iterator for BatchIter<'_, S> {
    type Item = (Tensor<S>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        if self.drop_last && end - self.pos < self.batch_size {
            self.pos = self.order.len();
            return None;
        }
        let indices = &self.order[self.pos..end];
        self.pos = end;
        let (mut images, labels) = self.ds.gather(indices);
        if self.augment {
            let offsets: Vec<(usize, usize)> = (0..indices.len())
                .map(|_| {
                    (
                        self.crop_rng.random_range(0..=2 * self.pad),
                        self.crop_rng.random_range(0..=2 * self.pad),
                    )
                })
                .collect();
            images =
                crop_with_offsets(&images, self.pad, &offsets).expect("crop preserves batch shape");
        }
        Some((images, labels))
    }
}

/// Deterministic 10-class fixture: 28x28 single-channel images, one bright
/// blob per class at a class-specific position over a noisy background.
/// Sample `i` gets class `i % 10`, so any multiple of ten is balanced. Small
/// models reach full training accuracy on it within a few epochs.
pub fn make_synthetic<S: Scalar>(n: usize, seed: u64, split: Split) -> Result<Dataset<S>> {
    if n < 10 {
        return Err(GodeError::Config(format!(
            "synthetic dataset needs n >= 10, got {n}"
        )));
    }
    let (h, w) = (28usize, 28usize);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    // blob centers: two rows of five, spaced so supports stay disjoint
    let centers: Vec<(usize, usize)> = (0..10)
        .map(|c| (7 + 14 * (c / 5), 4 + 5 * (c % 5)))
        .collect();
    for i in 0..n {
        let class = i % 10;
        let (cy, cx) = centers[class];
        let mut img = vec![S::ZERO; h * w];
        for v in img.iter_mut() {
            *v = S::from_f64(rng.random::<f64>() * 0.1);
        }
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                let y = (cy as i32 + dy) as usize;
                let x = (cx as i32 + dx) as usize;
                img[y * w + x] = S::from_f64(0.85 + rng.random::<f64>() * 0.1);
            }
        }
        images.extend_from_slice(&img);
        labels.push(class);
    }
    Dataset::new(images, labels, 1, h, w, split)
}
