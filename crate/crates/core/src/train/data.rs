//! MNIST (IDX) and CIFAR-10 (binary batch) readers, normalization and
//! augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MnistIdx,
    Cifar10Bin,
}

impl DatasetKind {
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::MnistIdx => [1, 28, 28],
            DatasetKind::Cifar10Bin => [3, 32, 32],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Training-time augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    /// Zero-pad 2 pixels per side, then crop back to the original size at
    /// a random offset.
    pub pad_crop: bool,
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    /// Directory holding the dataset files.
    pub path: PathBuf,
    pub split: Split,
    pub augment: Augment,
}

/// Images as raw bytes, `n × c × h × w`, plus labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    /// Keep only the first `n` items.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.pixels.truncate(n * self.image_len());
            self.labels.truncate(n);
        }
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= classes) {
            Some(i) => Err(Error::invalid(
                "dataset",
                format!("label {} at item {i} exceeds {classes} classes", self.labels[i]),
            )),
            None => Ok(()),
        }
    }
}

/// Per-channel mean and standard deviation of pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let [c, h, w] = ds.shape;
        let plane = h * w;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for i in 0..ds.len() {
            for (ch, px) in ds.image(i).chunks(plane).enumerate() {
                for &p in px {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (ds.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            offset: offset as u64,
            message: "truncated header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            what: path.display().to_string(),
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

/// Parse an IDX3 image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: bytes.len() as u64,
            message: format!("truncated: header promises {need} bytes"),
        });
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: bytes.len() as u64,
            message: format!("truncated: header promises {need} bytes"),
        });
    }
    Ok(bytes[8..need].to_vec())
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, rows, cols, pixels) = parse_idx_images(&read(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read(&lbl_path)?, &lbl_path)?;
    if labels.len() != n {
        return Err(Error::invalid(
            "load_mnist",
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    Ok(Dataset {
        shape: [1, rows, cols],
        pixels,
        labels,
    })
}

/// Parse one CIFAR-10 batch file of 3073-byte records.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 || bytes.is_empty() {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: (whole * CIFAR_RECORD) as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole * CIFAR_RECORD
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                offset: (i * CIFAR_RECORD) as u64,
                message: format!("label byte {} out of range 0..=9", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(Dataset {
        shape: [3, 32, 32],
        pixels,
        labels,
    })
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Test => vec!["test_batch.bin"],
    };
    let mut out = Dataset {
        shape: [3, 32, 32],
        pixels: Vec::new(),
        labels: Vec::new(),
    };
    for f in files {
        let path = dir.join(f);
        let part = parse_cifar_batch(&read(&path)?, &path)?;
        out.pixels.extend(part.pixels);
        out.labels.extend(part.labels);
    }
    Ok(out)
}

pub fn load_dataset(src: &DatasetSource) -> Result<Dataset> {
    match src.kind {
        DatasetKind::MnistIdx => load_mnist(&src.path, src.split),
        DatasetKind::Cifar10Bin => load_cifar10(&src.path, src.split),
    }
}

/// Seeded iteration over `(images, labels)` batches.
pub struct Batches<'a> {
    ds: &'a Dataset,
    norm: &'a Normalization,
    augment: Augment,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batches<'a> {
    /// `seed = None` keeps dataset order (evaluation).
    pub fn new(
        ds: &'a Dataset,
        norm: &'a Normalization,
        batch: usize,
        augment: Augment,
        seed: Option<u64>,
    ) -> Self {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        if seed.is_some() {
            order.shuffle(&mut rng);
        }
        Batches {
            ds,
            norm,
            augment,
            order,
            batch: batch.max(1),
            pos: 0,
            rng,
        }
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..(self.pos + self.batch).min(self.order.len())];
        self.pos += idx.len();
        let [c, h, w] = self.ds.shape;
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let (dy, dx, flip) = if self.augment.pad_crop || self.augment.flip {
                let (dy, dx) = if self.augment.pad_crop {
                    (self.rng.random_range(0..5i64) - 2, self.rng.random_range(0..5i64) - 2)
                } else {
                    (0, 0)
                };
                (dy, dx, self.augment.flip && self.rng.random_bool(0.5))
            } else {
                (0, 0, false)
            };
            write_image(self.ds.image(i), self.ds.shape, self.norm, dy, dx, flip, &mut data);
            labels.push(self.ds.labels[i] as usize);
        }
        let t = Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape");
        Some((t, labels))
    }
}

/// Normalize one image, shifted by `(dy, dx)` with zero fill (the
/// pad-and-crop augmentation) and optionally mirrored.
fn write_image(
    px: &[u8],
    [c, h, w]: [usize; 3],
    norm: &Normalization,
    dy: i64,
    dx: i64,
    flip: bool,
    out: &mut Vec<f32>,
) {
    for ch in 0..c {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        // Padding pixels are zero before normalization.
        let pad = (0.0 - m) / s;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let sx = if flip { w as i64 - 1 - x } else { x } + dx;
                let sy = y + dy;
                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                    out.push(pad);
                } else {
                    let p = px[ch * h * w + sy as usize * w + sx as usize];
                    out.push((p as f32 / 255.0 - m) / s);
                }
            }
        }
    }
}
