//! Labelled image datasets, the IDX file format and random sharding.

use std::borrow::Cow;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MlError;
use crate::tensor::DenseTensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images as `[n, dim]` f32 rows scaled to `[0, 1]`, labels in `0..=9`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    images: Arc<Vec<f32>>,
    labels: Arc<Vec<u8>>,
    /// Row indices into the shared storage, in dataset order.
    rows: Arc<Vec<u32>>,
}

impl Dataset {
    pub fn from_rows(dim: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self, MlError> {
        if dim == 0 || images.len() != labels.len() * dim {
            return Err(MlError::CountMismatch {
                images: if dim == 0 { 0 } else { images.len() / dim },
                labels: labels.len(),
            });
        }
        let rows = (0..labels.len() as u32).collect();
        Ok(Dataset {
            dim,
            images: Arc::new(images),
            labels: Arc::new(labels),
            rows: Arc::new(rows),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let r = self.rows[i] as usize;
        &self.images[r * self.dim..(r + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[self.rows[i] as usize]
    }

    pub fn max_label(&self) -> u8 {
        self.rows
            .iter()
            .map(|&r| self.labels[r as usize])
            .max()
            .unwrap_or(0)
    }

    /// Images `[start, end)` as row-major rows, borrowed when the view is
    /// contiguous in the shared storage.
    pub(crate) fn rows_block(&self, start: usize, end: usize) -> Cow<'_, [f32]> {
        let first = self.rows[start] as usize;
        let contiguous = self.rows[start..end]
            .iter()
            .enumerate()
            .all(|(k, &r)| r as usize == first + k);
        if contiguous {
            Cow::Borrowed(&self.images[first * self.dim..(first + end - start) * self.dim])
        } else {
            let mut out = Vec::with_capacity((end - start) * self.dim);
            for i in start..end {
                out.extend_from_slice(self.image(i));
            }
            Cow::Owned(out)
        }
    }

    fn with_rows(&self, rows: Vec<u32>) -> Dataset {
        Dataset {
            dim: self.dim,
            images: Arc::clone(&self.images),
            labels: Arc::clone(&self.labels),
            rows: Arc::new(rows),
        }
    }

    /// The first `n` samples (or all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        self.with_rows(self.rows.iter().take(n).copied().collect())
    }

    /// Storage row ids in dataset order; two views of the same storage are
    /// comparable through these.
    pub fn row_ids(&self) -> &[u32] {
        &self.rows
    }

    pub fn images_tensor(&self) -> DenseTensor {
        DenseTensor::from_f32(
            vec![self.len() as u32, self.dim as u32],
            self.rows_block(0, self.len()).into_owned(),
        )
        .expect("rows sized by dim")
    }

    pub fn labels_tensor(&self) -> DenseTensor {
        DenseTensor::from_i64(
            vec![self.len() as u32],
            (0..self.len()).map(|i| self.label(i) as i64).collect(),
        )
        .expect("one label per row")
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32, MlError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| MlError::Truncated(format!("{what} header")))
}

/// Parses IDX image bytes into `(count, rows*cols, pixels/255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), MlError> {
    let magic = read_u32_be(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(MlError::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(bytes, 4, "images")? as usize;
    let rows = read_u32_be(bytes, 8, "images")? as usize;
    let cols = read_u32_be(bytes, 12, "images")? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * dim {
        return Err(MlError::Truncated(format!(
            "images: expected {} pixel bytes, found {}",
            n * dim,
            body.len()
        )));
    }
    let pixels = body[..n * dim].iter().map(|&p| p as f32 / 255.0).collect();
    Ok((n, dim, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, MlError> {
    let magic = read_u32_be(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(MlError::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(MlError::Truncated(format!(
            "labels: expected {n} bytes, found {}",
            body.len()
        )));
    }
    Ok(body[..n].to_vec())
}

/// Loads an IDX image/label file pair (big-endian headers, as published).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, MlError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| MlError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    };
    let (n, dim, pixels) = parse_idx_images(&read(images)?)?;
    let labels = parse_idx_labels(&read(labels)?)?;
    if labels.len() != n {
        return Err(MlError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    Dataset::from_rows(dim, pixels, labels)
}

/// Seeded shuffle followed by a contiguous split into `n` parts. Sizes differ
/// by at most one; the first `len % n` parts take the extra sample.
pub fn partition(data: &Dataset, n: u32, seed: u64) -> Result<Vec<Dataset>, MlError> {
    let n = n as usize;
    if n == 0 {
        return Err(MlError::InvalidPartition("cannot split into zero parts".into()));
    }
    if n > data.len() {
        return Err(MlError::InvalidPartition(format!(
            "{n} parts requested from {} samples",
            data.len()
        )));
    }
    let mut order: Vec<u32> = data.rows.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = order.len() / n;
    let extra = order.len() % n;
    let mut parts = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let size = base + usize::from(i < extra);
        parts.push(data.with_rows(order[start..start + size].to_vec()));
        start += size;
    }
    Ok(parts)
}
