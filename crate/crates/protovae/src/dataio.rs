//! IDX dataset ingestion, normalization and deterministic batching.
//!
//! The IDX container is read big-endian and bit-exact: u8 image tensors
//! carry magic 0x00000803, u8 label vectors 0x00000801. Pixels map to
//! [-1, 1] via v ↦ 2·v/255 − 1; the inverse round(255·(v+1)/2) restores the
//! original bytes exactly.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Number of classes in the MNIST-family datasets this pipeline ingests.
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Images in [-1, 1] with one-hot labels.
#[derive(Clone, Debug)]
pub struct Dataset<F: Element> {
    pub images: Tensor<F>,
    pub labels: Tensor<F>,
    pub meta: DatasetMeta,
}

impl<F: Element> Dataset<F> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One image as a (1, C, H, W) tensor.
    pub fn image(&self, index: usize) -> Tensor<F> {
        let m = &self.meta;
        let plane = m.channels * m.height * m.width;
        let data = self.images.data()[index * plane..(index + 1) * plane].to_vec();
        Tensor::new(vec![1, m.channels, m.height, m.width], data).expect("image slice")
    }

    /// Class index of one sample.
    pub fn label(&self, index: usize) -> usize {
        let k = self.meta.num_classes;
        let row = &self.labels.data()[index * k..(index + 1) * k];
        row.iter()
            .position(|&v| v == F::ONE)
            .expect("one-hot label row")
    }

    /// One-hot label row of one sample.
    pub fn label_row(&self, index: usize) -> &[F] {
        let k = self.meta.num_classes;
        &self.labels.data()[index * k..(index + 1) * k]
    }

    /// Sub-dataset by index list; used by split and test harnesses.
    pub fn subset(&self, indices: &[usize], name: &str) -> Dataset<F> {
        let m = &self.meta;
        let plane = m.channels * m.height * m.width;
        let mut images = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len() * m.num_classes);
        for &i in indices {
            images.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
            labels.extend_from_slice(self.label_row(i));
        }
        Dataset {
            images: Tensor::new(
                vec![indices.len(), m.channels, m.height, m.width],
                images,
            )
            .expect("subset images"),
            labels: Tensor::new(vec![indices.len(), m.num_classes], labels)
                .expect("subset labels"),
            meta: DatasetMeta {
                name: name.to_string(),
                ..m.clone()
            },
        }
    }
}

fn read_u32_be(reader: &mut impl Read, path: &str, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|_| Error::IdxFormat {
        path: path.to_string(),
        offset: *offset,
        message: "truncated while reading a big-endian u32".into(),
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

fn read_bytes(reader: &mut impl Read, n: usize, path: &str, offset: &mut u64) -> Result<Vec<u8>> {
    let mut data = vec![0u8; n];
    reader.read_exact(&mut data).map_err(|_| Error::IdxFormat {
        path: path.to_string(),
        offset: *offset,
        message: format!("truncated: expected {n} more bytes"),
    })?;
    *offset += n as u64;
    Ok(data)
}

/// Normalizes one raw byte to [-1, 1].
pub fn normalize_pixel<F: Element>(v: u8) -> F {
    F::from_f64(2.0 * (v as f64) / 255.0 - 1.0)
}

/// Inverse of [`normalize_pixel`]; exact on round trip.
pub fn denormalize_pixel<F: Element>(v: F) -> u8 {
    (255.0 * (v.to_f64() + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8
}

/// Loads an IDX image/label pair into a normalized, one-hot dataset.
pub fn load_idx<F: Element>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<F>> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();

    let mut r = BufReader::new(
        File::open(images_path).map_err(|e| Error::io(&ipath, e))?,
    );
    let mut off = 0u64;
    let magic = read_u32_be(&mut r, &ipath, &mut off)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::IdxFormat {
            path: ipath,
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_MAGIC_IMAGES:#010x}"),
        });
    }
    let count = read_u32_be(&mut r, &ipath, &mut off)? as usize;
    let height = read_u32_be(&mut r, &ipath, &mut off)? as usize;
    let width = read_u32_be(&mut r, &ipath, &mut off)? as usize;
    let raw = read_bytes(&mut r, count * height * width, &ipath, &mut off)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(&ipath, e))? != 0 {
        return Err(Error::IdxFormat {
            path: ipath,
            offset: off,
            message: "trailing bytes after image data".into(),
        });
    }

    let mut r = BufReader::new(
        File::open(labels_path).map_err(|e| Error::io(&lpath, e))?,
    );
    let mut off = 0u64;
    let magic = read_u32_be(&mut r, &lpath, &mut off)?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::IdxFormat {
            path: lpath,
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_MAGIC_LABELS:#010x}"),
        });
    }
    let label_count = read_u32_be(&mut r, &lpath, &mut off)? as usize;
    if label_count != count {
        return Err(Error::IdxFormat {
            path: lpath,
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let raw_labels = read_bytes(&mut r, label_count, &lpath, &mut off)?;

    let images: Vec<F> = raw.iter().map(|&b| normalize_pixel(b)).collect();
    let mut labels = vec![F::ZERO; count * NUM_CLASSES];
    for (i, &l) in raw_labels.iter().enumerate() {
        if l as usize >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l,
                num_classes: NUM_CLASSES,
            });
        }
        labels[i * NUM_CLASSES + l as usize] = F::ONE;
    }

    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset {
        images: Tensor::new(vec![count, 1, height, width], images)?,
        labels: Tensor::new(vec![count, NUM_CLASSES], labels)?,
        meta: DatasetMeta {
            name,
            num_classes: NUM_CLASSES,
            channels: 1,
            height,
            width,
        },
    })
}

/// Re-encodes normalized pixels back to raw bytes (round-trip check and
/// PGM-free byte export).
pub fn denormalize_images<F: Element>(images: &Tensor<F>) -> Vec<u8> {
    images.data().iter().map(|&v| denormalize_pixel(v)).collect()
}

/// Deterministic disjoint split of a dataset; `fraction` goes to the first
/// part.
pub fn split<F: Element>(
    dataset: &Dataset<F>,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset<F>, Dataset<F>)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::InvalidArgument {
            op: "split",
            message: format!("fraction {fraction} must be in (0, 1)"),
        });
    }
    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let cut = (fraction * n as f64).floor() as usize;
    let first = dataset.subset(&indices[..cut], &format!("{}-a", dataset.meta.name));
    let second = dataset.subset(&indices[cut..], &format!("{}-b", dataset.meta.name));
    Ok((first, second))
}

/// Epoch-deterministic shuffled batch order over a dataset.
///
/// The same (seed, epoch) always produces the same permutation; every epoch
/// visits each index exactly once.
pub struct BatchIterator {
    num_samples: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
}

impl BatchIterator {
    pub fn new(num_samples: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            num_samples,
            batch_size,
            seed,
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Batches for the current epoch, then advances the epoch counter.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let batches = epoch_batches(self.num_samples, self.batch_size, self.seed, self.epoch);
        self.epoch += 1;
        batches
    }
}

/// Shuffled index permutation for one epoch.
pub fn epoch_permutation(num_samples: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5u64.wrapping_shl(32) ^ epoch as u64);
    let mut indices: Vec<usize> = (0..num_samples).collect();
    indices.shuffle(&mut rng);
    indices
}

/// Permutation chopped into batches (last batch may be short).
pub fn epoch_batches(
    num_samples: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    epoch_permutation(num_samples, seed, epoch)
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Gathers a batch into (N, C, H, W) images and (N, K) one-hot labels.
pub fn gather_batch<F: Element>(dataset: &Dataset<F>, indices: &[usize]) -> (Tensor<F>, Tensor<F>) {
    let m = &dataset.meta;
    let plane = m.channels * m.height * m.width;
    let mut images = Vec::with_capacity(indices.len() * plane);
    let mut labels = Vec::with_capacity(indices.len() * m.num_classes);
    for &i in indices {
        images.extend_from_slice(&dataset.images.data()[i * plane..(i + 1) * plane]);
        labels.extend_from_slice(dataset.label_row(i));
    }
    (
        Tensor::new(vec![indices.len(), m.channels, m.height, m.width], images)
            .expect("batch images"),
        Tensor::new(vec![indices.len(), m.num_classes], labels).expect("batch labels"),
    )
}
