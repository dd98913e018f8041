//! Datasets, synthetic Gaussian blobs, and the CSV / IDX loaders.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numcore::SeededRng;
use crate::{Error, Result};

/// Row-major feature matrix with integer class labels.
///
/// Immutable once built; every constructor validates the invariants
/// (`N >= 1`, finite features, labels below the class count).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
    checksum: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let name = name.into();
        if labels.is_empty() {
            return Err(Error::Validation(format!("dataset '{name}' has no samples")));
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Validation(format!(
                "dataset '{name}': {} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::Validation(format!("dataset '{name}' has zero classes")));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "dataset '{name}': non-finite feature in row {}",
                i / dim
            )));
        }
        if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= class_count) {
            return Err(Error::Validation(format!(
                "dataset '{name}': label {y} in row {i} is not below the class count {class_count}"
            )));
        }
        let checksum = content_checksum(&features, dim, &labels, class_count);
        Ok(Self {
            name,
            features,
            dim,
            labels,
            class_count,
            checksum,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
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

    pub fn class_count(&self) -> usize {
        self.class_count
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

    /// Hex SHA-256 of the canonical byte encoding (see [`content_checksum`]).
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("row {i} out of range for {} rows", self.len())));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(self.name.clone(), features, self.dim, labels, self.class_count)
    }

    /// Writes `f0,...,f{d-1},label` CSV. Values use shortest round-trip formatting.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).chain(["label".into()]).collect();
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for i in 0..self.len() {
            for v in self.row(i) {
                write!(w, "{v},").map_err(io)?;
            }
            writeln!(w, "{}", self.labels[i]).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// SHA-256 over `N, d, C` as little-endian `u64`, then every feature's IEEE-754
/// bits little-endian, then every label as little-endian `u64`.
pub fn content_checksum(features: &[f64], dim: usize, labels: &[usize], class_count: usize) -> String {
    let mut h = Sha256::new();
    for v in [labels.len(), dim, class_count] {
        h.update((v as u64).to_le_bytes());
    }
    for f in features {
        h.update(f.to_bits().to_le_bytes());
    }
    for &y in labels {
        h.update((y as u64).to_le_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub class_count: usize,
    pub samples_per_class: usize,
    /// One mean vector per class; all of the same dimension.
    pub centers: Vec<Vec<f64>>,
    /// One standard deviation per class.
    pub spread: Vec<f64>,
    #[serde(default)]
    pub label_noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.class_count;
        if c < 2 {
            return Err(Error::invalid("blobs need at least two classes"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::invalid("samples_per_class must be positive"));
        }
        if self.centers.len() != c || self.spread.len() != c {
            return Err(Error::invalid(format!(
                "expected {c} centers and spreads, got {} and {}",
                self.centers.len(),
                self.spread.len()
            )));
        }
        let d = self.centers[0].len();
        if d == 0 || self.centers.iter().any(|m| m.len() != d) {
            return Err(Error::invalid("centers must share one non-zero dimension"));
        }
        if self.centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("centers must be finite"));
        }
        if self.spread.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("spread must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::invalid(format!(
                "label_noise_rate must lie in [0, 1), got {}",
                self.label_noise_rate
            )));
        }
        Ok(())
    }
}

/// Number of items selected by a fraction: `floor(frac * n + 0.5)`.
///
/// A slack of 1e-9 absorbs binary representation error so decimal halves round up.
pub fn round_half_up(frac: f64, n: usize) -> usize {
    ((frac * n as f64 + 0.5 + 1e-9).floor() as usize).min(n)
}

/// Gaussian clusters, generated class by class.
///
/// Exactly `round_half_up(label_noise_rate, N)` labels are moved to a
/// uniformly chosen different class.
pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let d = spec.centers[0].len();
    let n = spec.class_count * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (class, (center, &sd)) in spec.centers.iter().zip(&spec.spread).enumerate() {
        for _ in 0..spec.samples_per_class {
            for &m in center {
                features.push(m + sd * rng.standard_normal());
            }
            labels.push(class);
        }
    }
    let flips = round_half_up(spec.label_noise_rate, n);
    for i in rng.sample_indices(n, flips) {
        let shift = 1 + rng.below(spec.class_count - 1);
        labels[i] = (labels[i] + shift) % spec.class_count;
    }
    Dataset::new(format!("blobs-{}", spec.seed), features, d, labels, spec.class_count)
}

/// Reads `f0,...,f{d-1},label` CSV. Lines starting with `#` are ignored.
///
/// The class count is `1 + max label` unless `class_count` is given, in which
/// case labels at or above it are rejected.
pub fn load_csv(path: &Path, class_count: Option<usize>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(file);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let header_line = header.position().map_or(1, |p| p.line());
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let d = cols.len().saturating_sub(1);
    let expected: Vec<String> = (0..d).map(|j| format!("f{j}")).chain(["label".into()]).collect();
    if d == 0 || cols != expected {
        return Err(parse_err(
            header_line,
            format!("header must be f0,...,f{{d-1}},label; got '{}'", cols.join(",")),
        ));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 1 {
            return Err(parse_err(line, format!("expected {} columns, found {}", d + 1, record.len())));
        }
        for (j, field) in record.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column f{j}: '{field}' is not a number")))?;
            features.push(v);
        }
        let raw = record[d].trim();
        let y: usize = raw
            .parse()
            .map_err(|_| parse_err(line, format!("label '{raw}' is not a class index")))?;
        if let Some(c) = class_count {
            if y >= c {
                return Err(Error::Validation(format!(
                    "{}:{line}: label {y} is not below the declared class count {c}",
                    path.display()
                )));
            }
        }
        labels.push(y);
    }
    let c = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let name = path.file_stem().map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, features, d, labels, c)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Big-endian IDX image/label pair (the MNIST layout).
///
/// Pixels are flattened row-major and divided by 255. The class count is
/// `1 + max label`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_all(images_path)?;
    let labels_raw = read_all(labels_path)?;

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}",
            images_path.display()
        )));
    }
    let magic = be_u32(&labels_raw, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}",
            labels_path.display()
        )));
    }
    let n = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let n_labels = be_u32(&labels_raw, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::Format(format!(
            "image count {n} does not match label count {n_labels}"
        )));
    }
    let pixels = n * rows * cols;
    let body = images
        .get(16..16 + pixels)
        .ok_or_else(|| Error::Format(format!("{}: truncated pixel data", images_path.display())))?;
    let label_body = labels_raw
        .get(8..8 + n)
        .ok_or_else(|| Error::Format(format!("{}: truncated label data", labels_path.display())))?;

    let features: Vec<f64> = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = label_body.iter().map(|&b| usize::from(b)).collect();
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let name = images_path
        .file_stem()
        .map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, features, rows * cols, labels, c)
}
