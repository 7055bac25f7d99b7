//! Dataset ingestion, augmentation and seeded batching.
//!
//! Supported containers:
//!
//! * IDX (MNIST, Fashion-MNIST): big-endian, image magic `0x00000803`,
//!   label magic `0x00000801`; optionally gzip-compressed.
//! * USPS plain binary: `u32` little-endian sample count `N`, then `N·256`
//!   little-endian `f32` pixels in `[0, 1]` (row-major 16×16), then `N`
//!   `u8` labels. `tools/usps_to_bin.py` produces it from the common
//!   distributions.
//! * CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//!   1024 red, 1024 green and 1024 blue bytes.
//!
//! All pixels are scaled to `[0, 1]`; no per-channel standardization.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::vit::Task;

const IDX_IMAGES: u32 = 0x0803;
const IDX_LABELS: u32 = 0x0801;
const CIFAR_RECORD: usize = 3073;
const USPS_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "mnist")]
    Mnist,
    #[serde(rename = "fashion-mnist")]
    FashionMnist,
    #[serde(rename = "usps")]
    Usps,
    #[serde(rename = "cifar10")]
    Cifar10,
}

impl DatasetKind {
    pub fn channels(self) -> usize {
        match self {
            DatasetKind::Cifar10 => 3,
            _ => 1,
        }
    }

    pub fn image_size(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => 28,
            DatasetKind::Usps => USPS_SIDE,
            DatasetKind::Cifar10 => 32,
        }
    }

    pub fn num_classes(self) -> usize {
        10
    }

    /// Digit datasets, where a horizontal flip changes the class.
    pub fn is_digits(self) -> bool {
        matches!(self, DatasetKind::Mnist | DatasetKind::Usps)
    }

    /// Size of the standard distribution of each split.
    pub fn standard_len(self, split: Split) -> usize {
        match (self, split) {
            (DatasetKind::Mnist | DatasetKind::FashionMnist, Split::Train) => 60_000,
            (DatasetKind::Mnist | DatasetKind::FashionMnist, Split::Test) => 10_000,
            (DatasetKind::Usps, Split::Train) => 7_291,
            (DatasetKind::Usps, Split::Test) => 2_007,
            (DatasetKind::Cifar10, Split::Train) => 50_000,
            (DatasetKind::Cifar10, Split::Test) => 10_000,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Usps => "usps",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion-mnist" => Ok(DatasetKind::FashionMnist),
            "usps" => Ok(DatasetKind::Usps),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected mnist, fashion-mnist, usps or cifar10)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images as `N×C×H×W` values in `[0, 1]` with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub split: Split,
    images: Tensor,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, split: Split, images: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != kind.channels() || s[2] != kind.image_size() || s[3] != kind.image_size() {
            return Err(Error::Data(format!(
                "{kind} images must be N×{}×{}×{}, got {s:?}",
                kind.channels(),
                kind.image_size(),
                kind.image_size()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != s[0] {
                return Err(Error::Data(format!("{} labels for {} images", labels.len(), s[0])));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= kind.num_classes()) {
                return Err(Error::Data(format!("label {bad} outside [0, {})", kind.num_classes())));
            }
        }
        Ok(Dataset {
            kind,
            split,
            images,
            labels,
        })
    }

    /// Loads `split` of `kind` from the files under `root` (see module docs
    /// for the expected names).
    pub fn load(kind: DatasetKind, root: &Path, split: Split) -> Result<Self> {
        let ds = match kind {
            DatasetKind::Mnist | DatasetKind::FashionMnist => {
                let prefix = match split {
                    Split::Train => "train",
                    Split::Test => "t10k",
                };
                let images = find_file(root, &format!("{prefix}-images-idx3-ubyte"))?;
                let labels = find_file(root, &format!("{prefix}-labels-idx1-ubyte"))?;
                load_idx(kind, split, &images, &labels)?
            }
            DatasetKind::Usps => load_usps(&find_file(root, &format!("usps-{split}.bin"))?, split)?,
            DatasetKind::Cifar10 => {
                let files = match split {
                    Split::Train => (1..=5)
                        .map(|i| find_file(root, &format!("data_batch_{i}.bin")))
                        .collect::<Result<Vec<_>>>()?,
                    Split::Test => vec![find_file(root, "test_batch.bin")?],
                };
                load_cifar(&files, split)?
            }
        };
        if ds.len() != kind.standard_len(split) {
            log::warn!(
                "{kind} {split} split has {} samples (standard distribution: {})",
                ds.len(),
                kind.standard_len(split)
            );
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.kind.num_classes()
    }

    /// Values per image, `C·H·W`.
    pub fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// A new dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let batch = self.gather(indices, None, 0)?;
        Dataset::new(self.kind, self.split, batch.images, batch.labels)
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Stacks the given samples into a batch, augmenting each one with a
    /// seed derived from `seed` and its dataset index.
    pub fn gather(&self, indices: &[usize], aug: Option<&Augmentation>, seed: u64) -> Result<Batch> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Bounds {
                    index: i,
                    len: self.len(),
                });
            }
            match aug {
                None => data.extend_from_slice(self.image(i)),
                Some(a) => {
                    let img = Tensor::new(self.image_shape(), self.image(i).to_vec())?;
                    data.extend(a.apply(&img, mix(seed, i as u64))?.into_data());
                }
            }
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok(Batch {
            images: Tensor::new(&shape, data)?,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            indices: indices.to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub indices: Vec<usize>,
}

fn find_file(root: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [root.join(stem), root.join(format!("{stem}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Data(format!(
        "missing dataset file {}",
        root.join(stem).display()
    )))
}

/// Reads a whole file, transparently inflating gzip content.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Integrity {
                path: path.to_owned(),
                msg: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX container, returning its dimensions and payload.
fn parse_idx<'a>(bytes: &'a [u8], path: &Path, magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let format = |msg: String| Error::Format {
        path: path.to_owned(),
        msg,
    };
    if bytes.len() < 4 {
        return Err(format("file too short for an IDX header".into()));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(format(format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Integrity {
            path: path.to_owned(),
            msg: "truncated header".into(),
        });
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let want = header + dims.iter().product::<usize>();
    if bytes.len() != want {
        return Err(Error::Integrity {
            path: path.to_owned(),
            msg: format!("{} bytes, header {dims:?} implies {want}", bytes.len()),
        });
    }
    Ok((dims, &bytes[header..]))
}

/// Loads an IDX image/label file pair.
pub fn load_idx(kind: DatasetKind, split: Split, images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_bytes(images_path)?;
    let label_bytes = read_bytes(labels_path)?;
    let (dims, pixels) = parse_idx(&image_bytes, images_path, IDX_IMAGES)?;
    let (ldims, labels) = parse_idx(&label_bytes, labels_path, IDX_LABELS)?;
    if dims[0] != ldims[0] {
        return Err(Error::Integrity {
            path: labels_path.to_owned(),
            msg: format!("{} labels for {} images", ldims[0], dims[0]),
        });
    }
    let images = Tensor::new(
        &[dims[0], 1, dims[1], dims[2]],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    Dataset::new(kind, split, images, Some(labels.iter().map(|&l| l as usize).collect()))
}

/// Loads the USPS plain binary container described in the module docs.
pub fn load_usps(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = read_bytes(path)?;
    let integrity = |msg: String| Error::Integrity {
        path: path.to_owned(),
        msg,
    };
    if bytes.len() < 4 {
        return Err(integrity("missing sample count".into()));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let px = USPS_SIDE * USPS_SIDE;
    let want = 4 + n * px * 4 + n;
    if bytes.len() != want {
        return Err(integrity(format!("{} bytes, {n} samples imply {want}", bytes.len())));
    }
    let pixels: Vec<f64> = bytes[4..4 + n * px * 4]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("{}: pixel {bad} outside [0, 1]", path.display())));
    }
    let labels = bytes[4 + n * px * 4..].iter().map(|&l| l as usize).collect();
    let images = Tensor::new(&[n, 1, USPS_SIDE, USPS_SIDE], pixels)?;
    Dataset::new(DatasetKind::Usps, split, images, Some(labels))
}

/// Serializes images (`N·256` values in `[0, 1]`) and labels into the USPS
/// plain binary container.
pub fn encode_usps(pixels: &[f32], labels: &[u8]) -> Result<Vec<u8>> {
    let n = labels.len();
    if pixels.len() != n * USPS_SIDE * USPS_SIDE {
        return Err(Error::dim(format!("{} pixels for {n} images of 16×16", pixels.len())));
    }
    let mut out = Vec::with_capacity(4 + pixels.len() * 4 + n);
    out.extend((n as u32).to_le_bytes());
    for p in pixels {
        out.extend(p.to_le_bytes());
    }
    out.extend_from_slice(labels);
    Ok(out)
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_bytes(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Integrity {
                path: path.clone(),
                msg: format!(
                    "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                    bytes.len()
                ),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(
        DatasetKind::Cifar10,
        split,
        Tensor::new(&[n, 3, 32, 32], pixels)?,
        Some(labels),
    )
}

/// Per-sample augmentation for classification training: zero-pad and
/// random crop, then an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    pub crop_padding: usize,
    pub flip: bool,
}

impl Augmentation {
    /// The training-time policy for `task` on `kind`; `None` means images
    /// pass through untouched.
    pub fn for_task(task: Task, kind: DatasetKind) -> Option<Augmentation> {
        match task {
            Task::Clustering => None,
            Task::Classification => Some(Augmentation {
                crop_padding: 4,
                flip: !kind.is_digits(),
            }),
        }
    }

    /// Augments one `[C, H, W]` image; deterministic in `seed`.
    pub fn apply(&self, image: &Tensor, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = 2 * self.crop_padding;
        let dy = rng.random_range(0..=span);
        let dx = rng.random_range(0..=span);
        let flipped = rng.random_bool(0.5);
        let out = shift(
            image,
            dy as isize - self.crop_padding as isize,
            dx as isize - self.crop_padding as isize,
        )?;
        if self.flip && flipped {
            flip_horizontal(&out)
        } else {
            Ok(out)
        }
    }
}

/// Augments `image` for `task`: identity for clustering.
pub fn augment(image: &Tensor, task: Task, kind: DatasetKind, seed: u64) -> Result<Tensor> {
    match Augmentation::for_task(task, kind) {
        None => Ok(image.clone()),
        Some(a) => a.apply(image, seed),
    }
}

fn chw(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::dim(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

/// Crop of the zero-padded image whose top-left corner is offset by
/// `(dy, dx)` from the original; `(0, 0)` is the identity.
pub fn shift(image: &Tensor, dy: isize, dx: isize) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(image.shape(), out)
}

pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (_, _, w) = chw(image)?;
    let mut out = image.data().to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(image.shape(), out)
}

/// SplitMix64-style combination of two seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Epoch-wise shuffled index batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchIterator {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchIterator {
    pub fn new(batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(BatchIterator {
            batch_size,
            seed,
            drop_last,
        })
    }

    /// Index batches covering `0..n` once for the given epoch.
    pub fn epoch(&self, n: usize, epoch: u64) -> Result<Vec<Vec<usize>>> {
        if self.batch_size > n {
            return Err(Error::Config(format!(
                "batch size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, epoch)));
        Ok(order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect())
    }

    /// Number of batches one epoch over `n` samples produces.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}

/// Materialized batches of `dataset` for one epoch.
pub fn batches<'a>(
    dataset: &'a Dataset,
    iter: &BatchIterator,
    epoch: u64,
    aug: Option<&Augmentation>,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let plan = iter.epoch(dataset.len(), epoch)?;
    let seed = mix(iter.seed ^ 0xa5a5, epoch);
    let aug = aug.copied();
    Ok(plan
        .into_iter()
        .map(move |idx| dataset.gather(&idx, aug.as_ref(), seed)))
}

#[cfg(test)]
mod tests;
