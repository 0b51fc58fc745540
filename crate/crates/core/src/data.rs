//! Datasets, file-format readers and seeded minibatching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Images `N×C×H×W` with labels in `[0, class_count)`. Pixels are stored as
/// `f32` and cast to the training precision batch by batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!(
                "dataset images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Contract(format!("label {bad} outside {class_count} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!(
                "subset of {n} samples requested from {}",
                self.len()
            )));
        }
        Ok(Dataset {
            images: self.images.slice_outer(0, n)?,
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
        })
    }

    /// Samples at `rows` as a batch in precision `T`.
    pub fn gather<T: Scalar>(&self, rows: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.images.gather_outer(rows)?.cast::<T>();
        Ok((x, rows.iter().map(|&r| self.labels[r]).collect()))
    }

    /// Per-channel mean and population std over the whole set.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.sample_shape()[0];
        let plane = self.sample_shape()[1] * self.sample_shape()[2];
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, chunk) in self.images.data().chunks(plane).enumerate() {
            let ch = i % c;
            for &v in chunk {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .collect();
        (mean, std)
    }

    /// `(x − mean_c) / std_c` per channel; channels with zero spread are only centered.
    pub fn standardize(&mut self, mean: &[f64], std: &[f64]) {
        let c = self.sample_shape()[0];
        let plane = self.sample_shape()[1] * self.sample_shape()[2];
        for (i, chunk) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            let s = if std[ch] > 0.0 { std[ch] } else { 1.0 };
            for v in chunk {
                *v = ((*v as f64 - mean[ch]) / s) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Pixels divided by 255 and nothing else.
    #[default]
    Scale,
    /// Additionally standardized per channel with training-set statistics.
    Standardize,
}

/// Applies `norm` to both splits using statistics of `train` only.
pub fn normalize(train: &mut Dataset, val: &mut Dataset, norm: Normalization) {
    if norm == Normalization::Standardize {
        let (mean, std) = train.channel_stats();
        train.standardize(&mean, &std);
        val.standardize(&mean, &std);
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::ingest(path, 0, format!("cannot read: {e}")))
}

/// Decodes up to `limit` CIFAR-10 records from one file's bytes.
pub fn decode_cifar10(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() {
        return Err(Error::ingest(path, 0, "empty file"));
    }
    let whole = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::ingest(
            path,
            (whole * CIFAR_RECORD) as u64,
            format!("truncated record ({} of {CIFAR_RECORD} bytes)", bytes.len() % CIFAR_RECORD),
        ));
    }
    let count = limit.map_or(whole, |l| l.min(whole));
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).take(count).enumerate() {
        if rec[0] > 9 {
            return Err(Error::ingest(
                path,
                (i * CIFAR_RECORD) as u64,
                format!("label {} outside 0..=9", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Inverse of [`decode_cifar10`] for `3×32×32` datasets scaled by 1/255.
pub fn encode_cifar10(data: &Dataset) -> Result<Vec<u8>> {
    if data.sample_shape() != [3, 32, 32] {
        return Err(Error::Shape(format!(
            "CIFAR records are 3×32×32, got {:?}",
            data.sample_shape()
        )));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (label, px) in data.labels().iter().zip(data.images().data().chunks(CIFAR_RECORD - 1)) {
        out.push(*label as u8);
        out.extend(px.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

fn load_cifar_files(dir: &Path, files: &[&str], limit: Option<usize>) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let remaining = limit.map(|l| l - labels.len());
        if remaining == Some(0) {
            break;
        }
        let path = dir.join(name);
        let (p, l) = decode_cifar10(&read_file(&path)?, &path, remaining)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if let Some(l) = limit {
        if labels.len() < l {
            return Err(Error::ingest(
                dir,
                0,
                format!("requested {l} records, found {}", labels.len()),
            ));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10)
}

/// Training and validation (test-batch) splits from the binary distribution.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_subset(dir, None, None)
}

/// Like [`load_cifar10`] but decoding only the first `train`/`val` records.
pub fn load_cifar10_subset(dir: &Path, train: Option<usize>, val: Option<usize>) -> Result<(Dataset, Dataset)> {
    Ok((
        load_cifar_files(dir, &CIFAR_TRAIN_FILES, train)?,
        load_cifar_files(dir, &[CIFAR_TEST_FILE], val)?,
    ))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::ingest(path, bytes.len() as u64, "file shorter than IDX header"));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(Error::ingest(path, 0, format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    let shape: Vec<usize> = (0..dims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::ingest(
            path,
            bytes.len().min(expected) as u64,
            format!("payload is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    Ok(shape)
}

/// Unsigned-byte IDX image and label files (`0x803` / `0x801`).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let shape = idx_header(&img, images_path, 0x0000_0803, 3)?;
    let [count] = idx_header(&lab, labels_path, 0x0000_0801, 1)?[..] else {
        unreachable!()
    };
    if shape[0] != count {
        return Err(Error::ingest(
            labels_path,
            4,
            format!("{count} labels for {} images", shape[0]),
        ));
    }
    if count == 0 || shape[1] == 0 || shape[2] == 0 {
        return Err(Error::ingest(images_path, 4, "zero-sized dimension"));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let pixels = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(Tensor::new(vec![count, 1, shape[1], shape[2]], pixels)?, labels, classes)
}

/// Class-conditional Gaussian blobs: each class has a mean image drawn
/// uniformly from `[0.2, 0.8]`, samples add `N(0, noise²)` per pixel and are
/// clamped to `[0, 1]`.
pub fn synthetic_dataset(seed: u64, n: usize, classes: usize, shape: &[usize]) -> Result<Dataset> {
    synthetic_splits(seed, n, 1, classes, shape, 0.15).map(|(train, _)| train)
}

/// Train and validation sets drawn from the same blob means.
pub fn synthetic_splits(
    seed: u64,
    n_train: usize,
    n_val: usize,
    classes: usize,
    shape: &[usize],
    noise: f64,
) -> Result<(Dataset, Dataset)> {
    if classes == 0 || n_train < classes || n_val == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs n_train ≥ classes ≥ 1 and n_val ≥ 1, got {n_train}, {classes}, {n_val}"
        )));
    }
    let &[c, h, w] = shape else {
        return Err(Error::Config(format!("synthetic shape must be [C, H, W], got {shape:?}")));
    };
    if c * h * w == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config("synthetic shape must be non-empty and noise finite".into()));
    }
    let dim = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| Uniform::new(0.2, 0.8).unwrap().sample_iter(&mut rng).take(dim).collect())
        .collect();
    let jitter = Normal::new(0.0, noise).unwrap();
    let draw = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let mut pixels = Vec::with_capacity(n * dim);
        for &l in &labels {
            pixels.extend(
                means[l]
                    .iter()
                    .map(|m| (m + jitter.sample(&mut rng)).clamp(0.0, 1.0) as f32),
            );
        }
        Dataset::new(Tensor::new(vec![n, c, h, w], pixels)?, labels, classes)
    };
    Ok((draw(n_train, 1)?, draw(n_val, 2)?))
}

/// Seeded shuffling schedule: epoch `e` uses ChaCha8 stream `e` of `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(BatchPlan { seed, batch_size })
    }

    pub fn permutation(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn batch_count(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Shuffled minibatches for one epoch; the last one may be short.
pub fn batches<'a, T: Scalar>(
    data: &'a Dataset,
    plan: &BatchPlan,
    epoch: usize,
) -> impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>> + 'a {
    let order = plan.permutation(epoch, data.len());
    let size = plan.batch_size;
    (0..plan.batch_count(data.len())).map(move |b| {
        let rows = &order[b * size..((b + 1) * size).min(order.len())];
        data.gather(rows)
    })
}

/// Sequential (unshuffled) batches, used for evaluation.
pub fn eval_batches<'a, T: Scalar>(
    data: &'a Dataset,
    batch_size: usize,
) -> impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>> + 'a {
    let n = data.len();
    (0..n.div_ceil(batch_size)).map(move |b| {
        let rows: Vec<usize> = (b * batch_size..((b + 1) * batch_size).min(n)).collect();
        data.gather(&rows)
    })
}
