//! Dataset ingestion (MNIST IDX, CIFAR-10 binary), stratified subsets,
//! per-channel normalisation, shuffled mini-batches and augmentation.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Environment variable consulted when no dataset root is given.
pub const DATA_ROOT_ENV: &str = "ONE_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel statistics used for normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `N x C x H x W`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Set once [`NormStats::apply`] has run.
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Data(format!("images must be N x C x H x W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset { images, labels, num_classes, split, stats: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            stats: self.stats.clone(),
        })
    }

    /// Stratified subset of `n` samples (all of them if `n >= len`). Each
    /// class receives its proportional share rounded by largest remainder,
    /// so per-class counts stay within one of the exact proportion. The
    /// original sample order is kept.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        if n == 0 {
            return Err(Error::Data("empty subset requested".into()));
        }
        let counts = self.class_counts();
        let total = self.len();
        let mut quota: Vec<usize> = counts.iter().map(|&c| c * n / total).collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        // Largest remainder first; lower class index breaks ties.
        order.sort_by_key(|&c| std::cmp::Reverse((counts[c] * n) % total));
        let mut left = n - quota.iter().sum::<usize>();
        for &c in &order {
            if left == 0 {
                break;
            }
            if quota[c] < counts[c] {
                quota[c] += 1;
                left -= 1;
            }
        }
        let rng = Rng::new(seed).derive_named("subset");
        let mut chosen = Vec::with_capacity(n);
        for (c, &q) in quota.iter().enumerate() {
            let mut members: Vec<usize> = (0..total).filter(|&i| self.labels[i] == c).collect();
            rng.derive(c as u64).shuffle(&mut members);
            chosen.extend_from_slice(&members[..q]);
        }
        chosen.sort_unstable();
        self.select(&chosen)
    }
}

impl NormStats {
    /// Mean and population standard deviation per channel.
    pub fn fit(ds: &Dataset) -> NormStats {
        let [c, h, w] = ds.sample_shape();
        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, v) in ds.images.data().iter().enumerate() {
            let ch = (i / plane) % c;
            let v = *v as f64;
            mean[ch] += v;
            sq[ch] += v * v;
        }
        let count = (ds.len() * plane) as f64;
        let mut std = vec![0.0; c];
        for ch in 0..c {
            mean[ch] /= count;
            let var = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0);
            std[ch] = var.sqrt().max(1e-8);
        }
        NormStats { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        if ds.stats.is_some() {
            return Err(Error::Data("dataset already normalised".into()));
        }
        let [c, h, w] = ds.sample_shape();
        if c != self.mean.len() {
            return Err(Error::Data(format!("stats for {} channels, data has {c}", self.mean.len())));
        }
        let plane = h * w;
        for (i, v) in ds.images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = ((*v as f64 - self.mean[ch]) / self.std[ch]) as f32;
        }
        ds.stats = Some(self.clone());
        Ok(())
    }
}

/// Fits statistics on `train` and applies them to both splits.
pub fn normalise_pair(train: &mut Dataset, test: &mut Dataset) -> Result<NormStats> {
    let stats = NormStats::fit(train);
    stats.apply(train)?;
    stats.apply(test)?;
    Ok(stats)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("{}: gzip: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parsed IDX payload: unsigned bytes with their dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX byte stream (big-endian header, unsigned-byte payload).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let be = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Parse {
                offset: bytes.len() as u64,
                message: format!("header truncated: expected at least {} bytes, found {}", off + 4, bytes.len()),
            })
    };
    let magic = be(0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(Error::Parse { offset: 0, message: format!("bad IDX magic 0x{other:08x}") });
        }
    };
    let dims = (0..ndims).map(|i| be(4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected) as u64,
            message: format!("expected {expected} bytes for dims {dims:?}, found {}", bytes.len()),
        });
    }
    Ok(IdxArray { magic, dims, data: bytes[header..].to_vec() })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_maybe_gz(path)?)
}

/// Loads an IDX image file and its label file as a 10-class dataset with
/// pixels scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse { offset: 0, message: format!("{} is not an image file", images.display()) });
    }
    if lab.magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse { offset: 0, message: format!("{} is not a label file", labels.display()) });
    }
    let [n, h, w] = [img.dims[0], img.dims[1], img.dims[2]];
    let pixels = img.data.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(vec![n, 1, h, w], pixels)?;
    Dataset::new(images, lab.data.iter().map(|&l| l as usize).collect(), 10, split)
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

fn dataset_dir(root: &Path, name: &str, probe: &str) -> Result<PathBuf> {
    for d in [root.join(name), root.to_path_buf()] {
        if find_file(&d, probe).is_some() {
            return Ok(d);
        }
    }
    Err(Error::Data(format!("no {name} files ({probe}[.gz]) under {}", root.display())))
}

/// MNIST from `root` or `root/mnist`, plain or gzipped.
pub fn load_mnist(root: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = format!("{prefix}-images-idx3-ubyte");
    let dir = dataset_dir(root, "mnist", &images)?;
    let labels = format!("{prefix}-labels-idx1-ubyte");
    let lp = find_file(&dir, &labels).ok_or_else(|| Error::Data(format!("missing {labels} in {}", dir.display())))?;
    load_idx(&find_file(&dir, &images).expect("probed"), &lp, split)
}

/// Parses concatenated CIFAR-10 binary records (label byte + 3072 pixels).
pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Parse {
            offset: whole as u64,
            message: format!("length {} is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Parse { offset: (i * CIFAR_RECORD) as u64, message: format!("label byte {}", rec[0]) });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, split)
}

pub fn load_cifar10_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let b = read_maybe_gz(p)?;
        if b.len() % CIFAR_RECORD != 0 {
            return parse_cifar10(&b, split).map_err(|e| match e {
                Error::Parse { offset, message } => Error::Parse { offset, message: format!("{}: {message}", p.display()) },
                other => other,
            });
        }
        bytes.extend(b);
    }
    parse_cifar10(&bytes, split)
}

/// CIFAR-10 from `root` or `root/cifar-10-batches-bin`.
pub fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let dir = dataset_dir(root, "cifar-10-batches-bin", &names[0])?;
    let paths = names
        .iter()
        .map(|n| find_file(&dir, n).ok_or_else(|| Error::Data(format!("missing {n} in {}", dir.display()))))
        .collect::<Result<Vec<_>>>()?;
    load_cifar10_bin(&paths, split)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Zero-pad by this many pixels, then crop back at a random offset.
    pub crop_pad: usize,
    pub hflip: bool,
}

impl AugmentSpec {
    pub fn none() -> Self {
        AugmentSpec::default()
    }

    pub fn standard() -> Self {
        AugmentSpec { crop_pad: 4, hflip: true }
    }

    pub fn is_off(&self) -> bool {
        self.crop_pad == 0 && !self.hflip
    }
}

/// Random crop and horizontal flip, drawn per sample from `rng`. Returns the
/// input unchanged when augmentation is off.
pub fn augment(batch: &Tensor<f32>, spec: AugmentSpec, rng: &mut Rng) -> Tensor<f32> {
    if spec.is_off() {
        return batch.clone();
    }
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let p = spec.crop_pad;
    let mut out = vec![0.0f32; batch.len()];
    let src = batch.data();
    for i in 0..n {
        let dy = if p > 0 { rng.below(2 * p + 1) } else { p };
        let dx = if p > 0 { rng.below(2 * p + 1) } else { p };
        let flip = spec.hflip && rng.below(2) == 1;
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                // Source row in the unpadded image.
                let sy = (y + dy) as isize - p as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let ox = if flip { w - 1 - x } else { x };
                    let sx = (ox + dx) as isize - p as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// One epoch of mini-batches. The visiting order is a permutation that
/// depends only on `(seed, epoch)`; the last batch may be short.
pub struct BatchIterator<'a> {
    data: &'a Dataset,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    augment: AugmentSpec,
    rng: Rng,
}

impl<'a> BatchIterator<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64, epoch: usize, augment: AugmentSpec) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let order = epoch_permutation(data.len(), seed, epoch);
        let rng = Rng::new(seed).derive_named("augment").derive(epoch as u64);
        Ok(BatchIterator { data, batch_size, order, pos: 0, augment, rng })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    Rng::new(seed).derive_named("shuffle").derive(epoch as u64).permutation(n)
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self.data.images.select_outer(idx).expect("indices in range");
        let images = augment(&images, self.augment, &mut self.rng);
        Some(Batch { images, labels: idx.iter().map(|&i| self.data.labels[i]).collect() })
    }
}

/// Sequential, unshuffled batches for evaluation.
pub fn eval_batches(data: &Dataset, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
    (0..data.len()).step_by(batch_size.max(1)).map(move |s| {
        let e = (s + batch_size).min(data.len());
        Batch { images: data.images.slice_outer(s, e).expect("in range"), labels: data.labels[s..e].to_vec() }
    })
}
