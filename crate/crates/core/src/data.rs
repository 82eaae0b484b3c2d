//! Datasets: IDX ingestion, synthetic blobs, stratified subsetting and
//! Dirichlet label-skew partitioning across clients.

use std::io::Read;
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Batch;
use crate::params::{layout, ParamVector};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major inputs with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::usage("dataset must hold at least one sample"));
        }
        Self::with_possibly_empty(inputs, labels, input_dim, num_classes)
    }

    /// Like [`Dataset::new`] but admits zero samples (client shards).
    fn with_possibly_empty(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || inputs.len() != labels.len() * input_dim {
            return Err(Error::Shape(format!(
                "{} input scalars for {} samples of dimension {input_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::usage("a dataset needs at least two classes"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::usage(format!("label {bad} out of range for {num_classes} classes")));
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        Ok(Self {
            inputs,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// The whole dataset as a batch; `None` when empty.
    pub fn batch(&self) -> Option<Batch<'_>> {
        Batch::new(&self.inputs, &self.labels, self.input_dim).ok()
    }

    /// Samples at `indices`, in the given order. May be empty.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs,
            labels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    /// Per-class sample counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// Packs the dataset into the parameter container: layers `inputs`,
    /// `labels` and `meta` (`[input_dim, num_classes]`).
    pub fn to_container(&self) -> ParamVector {
        let mut values = self.inputs.clone();
        values.extend(self.labels.iter().map(|&y| y as f64));
        values.push(self.input_dim as f64);
        values.push(self.num_classes as f64);
        let shapes = layout([
            ("inputs", self.inputs.len()),
            ("labels", self.labels.len()),
            ("meta", 2),
        ]);
        ParamVector::new(values, shapes).expect("dataset values are finite")
    }

    pub fn from_container(container: &ParamVector) -> Result<Self> {
        let layers: Vec<_> = container.layers().collect();
        let names: Vec<&str> = layers.iter().map(|(s, _)| s.name.as_str()).collect();
        if names != ["inputs", "labels", "meta"] || layers[2].1.len() != 2 {
            return Err(Error::usage("container does not hold a dataset"));
        }
        let meta = layers[2].1;
        let labels = layers[1]
            .1
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::usage(format!("invalid label {v} in container")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_possibly_empty(layers[0].1.to_vec(), labels, meta[0] as usize, meta[1] as usize)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Ingestion {
                path: path.to_owned(),
                offset: 0,
                message: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxFile {
    path: PathBuf,
    bytes: Vec<u8>,
}

impl IdxFile {
    fn open(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_owned(),
            bytes: read_maybe_gz(path)?,
        })
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Ingestion {
            path: self.path.clone(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn be_u32(&self, offset: usize) -> Result<u32> {
        self.bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| self.err(self.bytes.len(), "truncated header"))
    }

    fn expect_magic(&self, magic: u32) -> Result<()> {
        let found = self.be_u32(0)?;
        if found != magic {
            return Err(self.err(0, format!("magic {found:#010x}, expected {magic:#010x}")));
        }
        Ok(())
    }

    fn payload(&self, header_len: usize, len: usize) -> Result<&[u8]> {
        let end = header_len + len;
        if self.bytes.len() < end {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated payload: expected {end} bytes"),
            ));
        }
        if self.bytes.len() > end {
            return Err(self.err(end, "trailing bytes after payload"));
        }
        Ok(&self.bytes[header_len..end])
    }
}

/// Reads an IDX image/label pair (optionally gzip-compressed). Pixels are
/// scaled to `[0, 1]` and images flattened row by row.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = IdxFile::open(images_path.as_ref())?;
    images.expect_magic(IDX_IMAGES_MAGIC)?;
    let count = images.be_u32(4)? as usize;
    let rows = images.be_u32(8)? as usize;
    let cols = images.be_u32(12)? as usize;
    let input_dim = rows * cols;
    if input_dim == 0 {
        return Err(images.err(8, "zero-sized images"));
    }
    let pixels = images.payload(16, count * input_dim)?;

    let labels_file = IdxFile::open(labels_path.as_ref())?;
    labels_file.expect_magic(IDX_LABELS_MAGIC)?;
    let label_count = labels_file.be_u32(4)? as usize;
    if label_count != count {
        return Err(labels_file.err(
            4,
            format!("{label_count} labels for {count} images"),
        ));
    }
    let raw_labels = labels_file.payload(8, count)?;
    if count == 0 {
        return Err(images.err(4, "no samples"));
    }

    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(inputs, labels, input_dim, num_classes)
}

/// Gaussian clusters around random class centers; class-major order.
pub fn synth_blobs(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || input_dim == 0 || samples_per_class == 0 {
        return Err(Error::config(
            "synthetic blobs need >= 2 classes and positive dimension and size",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config(format!("blob spread must be non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..num_classes * input_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            2.0 * z
        })
        .collect();
    let n = num_classes * samples_per_class;
    let mut inputs = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        let center = &centers[k * input_dim..(k + 1) * input_dim];
        for _ in 0..samples_per_class {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                inputs.push(c + spread * z);
            }
            labels.push(k);
        }
    }
    Dataset::new(inputs, labels, input_dim, num_classes)
}

/// Splits per class: `round(test_fraction * class_count)` samples of each
/// class go to the test side. Both sides keep original order.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut idx in ds.indices_by_class() {
        idx.shuffle(&mut rng);
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        return Err(Error::config("stratified split left one side empty"));
    }
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Draws exactly `n` samples, allocating per class in proportion to the
/// class counts (largest remainders first, lower class on ties).
pub fn stratified_subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::config(format!("cannot draw {n} samples from {}", ds.len())));
    }
    let by_class = ds.indices_by_class();
    let total = ds.len() as f64;
    let exact: Vec<f64> = by_class.iter().map(|c| n as f64 * c.len() as f64 / total).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = n - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for k in order {
        if remaining == 0 {
            break;
        }
        if quota[k] < by_class[k].len() {
            quota[k] += 1;
            remaining -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (mut idx, q) in by_class.into_iter().zip(quota) {
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..q]);
    }
    chosen.sort_unstable();
    Ok(ds.subset(&chosen))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("partition needs at least one client"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("Dirichlet alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Client shards plus the ids of clients that received nothing.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Dataset>,
    pub empty_clients: Vec<usize>,
}

/// One draw from Dirichlet(alpha, ..., alpha) of the given size, via
/// normalized Gamma(alpha, 1) variates. Gammas are handled in log space so
/// very small `alpha` cannot underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, size: usize, rng: &mut R) -> Vec<f64> {
    let log_gammas: Vec<f64> = if alpha >= 1.0 {
        let gamma = Gamma::new(alpha, 1.0).expect("alpha is positive");
        (0..size).map(|_| gamma.sample(rng).ln()).collect()
    } else {
        // G(a) = G(a + 1) * U^(1/a)
        let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha is positive");
        (0..size)
            .map(|_| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                gamma.sample(rng).ln() + u.ln() / alpha
            })
            .collect()
    };
    let max = log_gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_gammas.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / sum).collect()
}

/// Label-skewed split: for each class a proportion vector is drawn from
/// Dirichlet(alpha) and every sample of that class goes to one client drawn
/// from it. Shards preserve the original sample order.
pub fn dirichlet_partition(ds: &Dataset, cfg: &PartitionConfig) -> Result<Partition> {
    cfg.validate()?;
    let n = cfg.num_clients;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n];
    for class_indices in ds.indices_by_class() {
        let proportions = sample_dirichlet(cfg.alpha, n, &mut rng);
        let pick = WeightedIndex::new(&proportions)
            .map_err(|e| Error::config(format!("degenerate Dirichlet draw: {e}")))?;
        for i in class_indices {
            assigned[pick.sample(&mut rng)].push(i);
        }
    }
    let mut empty_clients = Vec::new();
    let shards = assigned
        .iter_mut()
        .enumerate()
        .map(|(client, idx)| {
            if idx.is_empty() {
                log::warn!("client {client} received no samples (alpha = {})", cfg.alpha);
                empty_clients.push(client);
            }
            idx.sort_unstable();
            ds.subset(idx)
        })
        .collect();
    Ok(Partition { shards, empty_clients })
}

/// Normalizes a histogram to a probability vector (all zeros stay zeros).
pub fn normalize_histogram(h: &[usize]) -> Vec<f64> {
    let total: usize = h.iter().sum();
    if total == 0 {
        return vec![0.0; h.len()];
    }
    h.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Total-variation distance between two probability vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
