//! Datasets: seeded synthetic generators plus IDX and CSV loaders.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const SPLIT_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated, expected {expected} bytes but found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: line {line} has {found} fields, expected {expected}")]
    RaggedRow {
        path: String,
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("{path}: line {line}, column {column}: {value:?} is not a number")]
    NonNumeric {
        path: String,
        line: u64,
        column: String,
        value: String,
    },

    #[error("{path}: label column {column:?} not found in header")]
    MissingColumn { path: String, column: String },

    #[error("{path}: only one distinct label; need at least two classes")]
    SingleClass { path: String },

    #[error("{path}: no rows")]
    Empty { path: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("invalid dataset: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Row-major feature matrix with class labels and named splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    splits: Splits,
}

impl Dataset {
    /// Builds a dataset with a stratified 80/10/10 split.
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::with_split_seed(features, dim, labels, classes, SPLIT_SEED)
    }

    pub fn with_split_seed(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(DataError::Invalid("feature dimension is zero".into()));
        }
        if classes < 2 {
            return Err(DataError::Invalid(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::Invalid(format!(
                "{} feature values do not fill {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let splits = stratified_split(&labels, classes, seed);
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Writes the dataset as CSV with columns `x0..x{D-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
            header.push("label".into());
            w.write_record(&header).map_err(|e| csv_err(path, e))?;
            for i in 0..self.len() {
                let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
                rec.push(self.labels[i].to_string());
                w.write_record(&rec).map_err(|e| csv_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))?;
        }
        write_atomic(path, &out).map_err(|e| DataError::Invalid(e.to_string()))
    }
}

/// Per class: shuffle, then 80% train, 10% val, remainder test.
fn stratified_split(labels: &[usize], classes: usize, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (n as f64 * 0.8).round() as usize;
        let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
        splits.train.extend_from_slice(&idx[..n_train]);
        splits.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    splits
}

/// `classes` isotropic Gaussian clusters whose means sit evenly on a circle of
/// radius 2 in the first two coordinates. Rows are grouped by class.
pub fn gaussian_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    std: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(DataError::Invalid(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if dim < 2 {
        return Err(DataError::Invalid(format!(
            "blobs need dim >= 2, got {dim}"
        )));
    }
    if !(std > 0.0 && std.is_finite()) {
        return Err(DataError::Invalid(format!("std must be > 0, got {std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mean = blob_mean(c, classes, dim);
        for _ in 0..per_class {
            for m in &mean {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(m + std * noise);
            }
            labels.push(c);
        }
    }
    Dataset::with_split_seed(features, dim, labels, classes, seed)
}

pub fn blob_mean(class: usize, classes: usize, dim: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
    let mut mean = vec![0.0; dim];
    mean[0] = 2.0 * angle.cos();
    mean[1] = 2.0 * angle.sin();
    mean
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> DataError {
    DataError::Csv {
        path: path.display().to_string(),
        source,
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path, magic: u32, header_words: usize) -> Result<(Self, Vec<usize>)> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let reader = Self { path, bytes };
        let found = reader.word(0)?;
        if found != magic {
            return Err(DataError::BadMagic {
                path: path.display().to_string(),
                expected: magic,
                found,
            });
        }
        let dims = (1..=header_words)
            .map(|w| reader.word(w).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let payload: usize = dims.iter().product();
        let expected = 4 * (header_words + 1) + payload;
        if reader.bytes.len() < expected {
            return Err(reader.truncated(expected));
        }
        Ok((reader, dims))
    }

    fn truncated(&self, expected: usize) -> DataError {
        DataError::Truncated {
            path: self.path.display().to_string(),
            expected,
            found: self.bytes.len(),
        }
    }

    fn word(&self, index: usize) -> Result<u32> {
        let start = 4 * index;
        let raw = self
            .bytes
            .get(start..start + 4)
            .ok_or_else(|| self.truncated(start + 4))?;
        Ok(u32::from_be_bytes(raw.try_into().expect("4-byte slice")))
    }
}

/// Loads an IDX image file (magic `0x00000803`) and label file
/// (magic `0x00000801`). Pixels are scaled to `[0, 1]` and flattened.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (images, dims) = IdxReader::open(images_path, IDX_IMAGES_MAGIC, 3)?;
    let (labels_file, label_dims) = IdxReader::open(labels_path, IDX_LABELS_MAGIC, 1)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    if count != label_dims[0] {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_dims[0],
        });
    }
    let dim = rows * cols;
    let features: Vec<f64> = images.bytes[16..16 + count * dim]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = labels_file.bytes[8..8 + count]
        .iter()
        .map(|&b| usize::from(b))
        .collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(DataError::SingleClass {
            path: labels_path.display().to_string(),
        });
    }
    Dataset::new(features, dim, labels, classes)
}

/// Loads a headed, comma-separated numeric table. Distinct label values are
/// sorted (numerically when they all parse, otherwise lexically) and mapped
/// onto `0..K`.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let width = header.len();
    let label_idx = header
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| DataError::MissingColumn {
            path: path.display().to_string(),
            column: label_column.to_string(),
        })?;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(DataError::RaggedRow {
                path: path.display().to_string(),
                line,
                expected: width,
                found: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let value: f64 = cell.trim().parse().map_err(|_| DataError::NonNumeric {
                path: path.display().to_string(),
                line,
                column: header[j].to_string(),
                value: cell.to_string(),
            })?;
            features.push(value);
        }
    }
    if raw_labels.is_empty() {
        return Err(DataError::Empty {
            path: path.display().to_string(),
        });
    }

    let numeric: Option<Vec<f64>> = raw_labels.iter().map(|l| l.parse::<f64>().ok()).collect();
    let labels: Vec<usize> = match numeric {
        Some(values) => {
            let mut distinct = values.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            values
                .iter()
                .map(|v| distinct.partition_point(|d| d.total_cmp(v).is_lt()))
                .collect()
        }
        None => {
            let mut index = BTreeMap::new();
            for l in &raw_labels {
                index.insert(l.clone(), 0usize);
            }
            for (i, v) in index.values_mut().enumerate() {
                *v = i;
            }
            raw_labels.iter().map(|l| index[l]).collect()
        }
    };
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(DataError::SingleClass {
            path: path.display().to_string(),
        });
    }
    Dataset::new(features, width - 1, labels, classes)
}
