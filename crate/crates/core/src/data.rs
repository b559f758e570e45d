//! Dataset ingestion (IDX files), image preprocessing, and Dirichlet non-IID
//! partitioning across clients.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use thiserror::Error;

use crate::circuits::EncodedInput;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Side length of the pooled image; 16 features fill a 4-qubit register.
pub const POOLED_SIDE: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, need {expected} bytes but file has {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("binary filter needs two distinct classes, got {0} twice")]
    SameClass(u8),
    #[error("no samples with label {0} or {1}")]
    EmptyFilter(u8, u8),
    #[error("image is all zero and cannot be normalized")]
    ZeroImage,
    #[error("image of {rows}x{cols} cannot be pooled to {POOLED_SIDE}x{POOLED_SIDE}")]
    ImageShape { rows: usize, cols: usize },
    #[error("Dirichlet concentration must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("partition needs at least one label row and one client (got {rows}x{clients})")]
    EmptyPartition { rows: usize, clients: usize },
    #[error("label {label} has no row in a {rows}-row partition matrix")]
    LabelOutsidePartition { label: u8, rows: usize },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Grayscale images with their class labels, as read from IDX files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixel bytes, `rows * cols` per image.
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> RawDataset {
        RawDataset {
            rows: self.rows,
            cols: self.cols,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Reads a file, transparently gunzipping it when it carries the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            got: bytes.len(),
        })
    } else {
        Ok(())
    }
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    need(path, bytes, 4)?;
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Decodes an IDX image file (`0x00000803`, count, rows, cols, pixels) and
/// an IDX label file (`0x00000801`, count, labels). All header integers are
/// big-endian; `.gz` inputs are decompressed first.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<RawDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());

    let ib = read_maybe_gz(ip)?;
    check_magic(ip, &ib, IMAGE_MAGIC)?;
    need(ip, &ib, 16)?;
    let count = be_u32(&ib, 4) as usize;
    let rows = be_u32(&ib, 8) as usize;
    let cols = be_u32(&ib, 12) as usize;
    let pixels = rows.saturating_mul(cols);
    need(ip, &ib, count.saturating_mul(pixels).saturating_add(16))?;

    let lb = read_maybe_gz(lp)?;
    check_magic(lp, &lb, LABEL_MAGIC)?;
    need(lp, &lb, 8)?;
    let label_count = be_u32(&lb, 4) as usize;
    need(lp, &lb, 8 + label_count)?;

    if count != label_count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let images = ib[16..16 + count * pixels]
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(<[u8]>::to_vec)
        .collect();
    Ok(RawDataset {
        rows,
        cols,
        images,
        labels: lb[8..8 + count].to_vec(),
    })
}

/// Keeps samples labelled `class_a` or `class_b`, in order, relabelled to 0 and 1.
pub fn filter_binary(ds: &RawDataset, class_a: u8, class_b: u8) -> Result<RawDataset> {
    if class_a == class_b {
        return Err(DataError::SameClass(class_a));
    }
    let mut out = RawDataset {
        rows: ds.rows,
        cols: ds.cols,
        images: Vec::new(),
        labels: Vec::new(),
    };
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        let mapped = if l == class_a {
            0
        } else if l == class_b {
            1
        } else {
            continue;
        };
        out.images.push(img.clone());
        out.labels.push(mapped);
    }
    if out.is_empty() {
        return Err(DataError::EmptyFilter(class_a, class_b));
    }
    Ok(out)
}

/// Block-average pooling to a 4x4 grid (7x7 blocks for 28x28 input), then
/// L2 normalization. Features are the pooled grid in row-major order.
pub fn preprocess(image: &[u8], rows: usize, cols: usize) -> Result<EncodedInput> {
    if rows == 0
        || cols == 0
        || !rows.is_multiple_of(POOLED_SIDE)
        || !cols.is_multiple_of(POOLED_SIDE)
        || image.len() != rows * cols
    {
        return Err(DataError::ImageShape { rows, cols });
    }
    let (bh, bw) = (rows / POOLED_SIDE, cols / POOLED_SIDE);
    let mut pooled = [0.0f64; POOLED_SIDE * POOLED_SIDE];
    for r in 0..rows {
        for c in 0..cols {
            pooled[(r / bh) * POOLED_SIDE + c / bw] += f64::from(image[r * cols + c]);
        }
    }
    let area = (bh * bw) as f64;
    for p in &mut pooled {
        *p /= area;
    }
    if pooled.iter().all(|&p| p == 0.0) {
        return Err(DataError::ZeroImage);
    }
    Ok(EncodedInput::normalized(&pooled).expect("nonzero pooled vector normalizes"))
}

/// Preprocesses every image of `ds` in parallel, preserving order.
pub fn preprocess_all(ds: &RawDataset) -> Result<Vec<EncodedInput>> {
    ds.images
        .par_iter()
        .map(|img| preprocess(img, ds.rows, ds.cols))
        .collect()
}

/// Label-by-client proportions: `d[y][m]` is the share of label `y` given to
/// client `m`; every row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMatrix {
    pub d: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl PartitionMatrix {
    pub fn labels(&self) -> usize {
        self.d.len()
    }

    pub fn clients(&self) -> usize {
        self.d.first().map_or(0, Vec::len)
    }
}

/// Draws each of the `labels` rows from a symmetric Dirichlet(alpha) over
/// `clients` entries, by normalizing independent Gamma(alpha, 1) draws.
pub fn sample_partition_matrix<R: Rng + ?Sized>(
    alpha: f64,
    labels: usize,
    clients: usize,
    rng: &mut R,
) -> Result<PartitionMatrix> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::InvalidAlpha(alpha));
    }
    if labels == 0 || clients == 0 {
        return Err(DataError::EmptyPartition {
            rows: labels,
            clients,
        });
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| DataError::InvalidAlpha(alpha))?;
    let d = (0..labels)
        .map(|_| {
            // tiny alpha can underflow every draw to zero; redraw, and in the
            // limit put all mass on one client
            for _ in 0..16 {
                let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
                let sum: f64 = draws.iter().sum();
                if sum > 0.0 {
                    return draws.iter().map(|x| x / sum).collect();
                }
            }
            let mut row = vec![0.0; clients];
            row[rng.gen_range(0..clients)] = 1.0;
            row
        })
        .collect();
    Ok(PartitionMatrix { d, alpha })
}

/// Integer split of `total` proportional to `shares`, by largest remainder
/// (ties go to the lower index). Always sums to `total`.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let left = total.saturating_sub(assigned);
    for &i in order.iter().cycle().take(left) {
        counts[i] += 1;
    }
    counts
}

/// Splits sample indices across clients: for each label the matching indices
/// are shuffled and cut into contiguous chunks sized by that label's row of
/// `d`. Every index lands in exactly one client.
pub fn partition_indices<R: Rng + ?Sized>(
    labels: &[u8],
    d: &PartitionMatrix,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let (rows, clients) = (d.labels(), d.clients());
    if rows == 0 || clients == 0 {
        return Err(DataError::EmptyPartition { rows, clients });
    }
    if let Some(&label) = labels.iter().find(|&&l| usize::from(l) >= rows) {
        return Err(DataError::LabelOutsidePartition { label, rows });
    }
    let mut out = vec![Vec::new(); clients];
    for (y, row) in d.d.iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len())
            .filter(|&i| usize::from(labels[i]) == y)
            .collect();
        idx.shuffle(rng);
        let counts = largest_remainder(idx.len(), row);
        let mut rest = idx.as_slice();
        for (m, &c) in counts.iter().enumerate() {
            let (chunk, tail) = rest.split_at(c);
            out[m].extend_from_slice(chunk);
            rest = tail;
        }
    }
    Ok(out)
}

pub fn partition<R: Rng + ?Sized>(
    ds: &RawDataset,
    d: &PartitionMatrix,
    rng: &mut R,
) -> Result<Vec<RawDataset>> {
    Ok(partition_indices(&ds.labels, d, rng)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect())
}
