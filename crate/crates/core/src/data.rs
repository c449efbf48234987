//! Labelled datasets: seeded Gaussian-cluster generators and the IDX container.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Inputs with integer labels, optional subpopulation tags and a train/test marker per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor<f64>,
    pub labels: Vec<usize>,
    pub tags: Option<Vec<usize>>,
    pub classes: usize,
    pub is_test: Vec<bool>,
}

impl Dataset {
    /// All rows start in the training split.
    pub fn new(inputs: Tensor<f64>, labels: Vec<usize>, tags: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        if inputs.order() != 2 || inputs.rows() != labels.len() {
            return Err(Error::shape(format!("{} labels for inputs of shape {:?}", labels.len(), inputs.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} outside 0..{classes}")));
        }
        if tags.as_ref().is_some_and(|t| t.len() != labels.len()) {
            return Err(Error::shape("tag count differs from label count"));
        }
        let n = labels.len();
        Ok(Dataset { inputs, labels, tags, classes, is_test: vec![false; n] })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Marks `round(test_fraction · n_c)` rows of every class `c` as test,
    /// chosen by a seeded shuffle within the class.
    pub fn split_stratified(&mut self, test_fraction: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.is_test.iter_mut().for_each(|t| *t = false);
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let k = (test_fraction * idx.len() as f64).round() as usize;
            for &i in &idx[..k] {
                self.is_test[i] = true;
            }
        }
    }

    /// Rows `idx` in the given order, all marked as training rows.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let cols = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        let inputs = if idx.is_empty() {
            // zero-row tensors are not representable; keep a 1×cols placeholder with no labels
            Tensor::zeros(&[1, cols])
        } else {
            Tensor::matrix(idx.len(), cols, data).expect("subset shape")
        };
        Dataset {
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            tags: self.tags.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
            classes: self.classes,
            is_test: vec![false; idx.len()],
        }
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_test[i]).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_test[i]).collect()
    }

    pub fn train(&self) -> Dataset {
        self.subset(&self.train_indices())
    }

    pub fn test(&self) -> Dataset {
        self.subset(&self.test_indices())
    }

    pub fn indices_with_tag(&self, tag: usize) -> Vec<usize> {
        match &self.tags {
            Some(t) => (0..self.len()).filter(|&i| t[i] == tag).collect(),
            None => Vec::new(),
        }
    }
}

/// Gaussian clusters, several per class.
///
/// Cluster `k` belongs to class `k / clusters_per_class`. Its center is
/// `separation · N(0, I)` unless given explicitly, and its samples are
/// `center + spread · N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub clusters_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub separation: f64,
    pub samples_per_cluster: usize,
    /// Per-cluster sample counts overriding `samples_per_cluster`.
    pub cluster_samples: Option<Vec<usize>>,
    /// Per-cluster subpopulation tags; defaults to the cluster index.
    pub cluster_tags: Option<Vec<usize>>,
    /// Explicit cluster centers overriding the random draw.
    pub centers: Option<Vec<Vec<f64>>>,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, clusters_per_class: usize, input_dim: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            clusters_per_class,
            input_dim,
            spread: 1.0,
            separation: 4.0,
            samples_per_cluster: 50,
            cluster_samples: None,
            cluster_tags: None,
            centers: None,
            test_fraction: DEFAULT_TEST_FRACTION,
            seed,
        }
    }

    pub fn clusters(&self) -> usize {
        self.classes * self.clusters_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.clusters_per_class == 0 || self.input_dim == 0 {
            return Err(Error::config("classes, clusters_per_class and input_dim must be positive"));
        }
        if !(self.spread >= 0.0 && self.separation >= 0.0 && self.spread.is_finite() && self.separation.is_finite()) {
            return Err(Error::config("spread and separation must be finite and non-negative"));
        }
        let k = self.clusters();
        if self.cluster_samples.as_ref().is_some_and(|c| c.len() != k) {
            return Err(Error::config(format!("cluster_samples must list {k} counts")));
        }
        if self.cluster_tags.as_ref().is_some_and(|c| c.len() != k) {
            return Err(Error::config(format!("cluster_tags must list {k} tags")));
        }
        if let Some(c) = &self.centers {
            if c.len() != k || c.iter().any(|v| v.len() != self.input_dim) {
                return Err(Error::config(format!("centers must list {k} points of dimension {}", self.input_dim)));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction must lie in [0, 1)"));
        }
        let total: usize = (0..k).map(|j| self.count(j)).sum();
        if total == 0 {
            return Err(Error::config("synthetic dataset would be empty"));
        }
        Ok(())
    }

    fn count(&self, cluster: usize) -> usize {
        self.cluster_samples.as_ref().map_or(self.samples_per_cluster, |c| c[cluster])
    }
}

/// Draws the dataset described by `spec` and applies a stratified split.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let k = spec.clusters();
    let centers: Vec<Vec<f64>> = match &spec.centers {
        Some(c) => c.clone(),
        None => (0..k)
            .map(|_| (0..d).map(|_| spec.separation * { let g: f64 = StandardNormal.sample(&mut rng); g }).collect())
            .collect(),
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut tags = Vec::new();
    for (j, center) in centers.iter().enumerate() {
        for _ in 0..spec.count(j) {
            for c in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(c + spec.spread * noise);
            }
            labels.push(j / spec.clusters_per_class);
            tags.push(spec.cluster_tags.as_ref().map_or(j, |t| t[j]));
        }
    }
    let rows = labels.len();
    let mut ds = Dataset::new(Tensor::matrix(rows, d, data)?, labels, Some(tags), spec.classes)?;
    ds.split_stratified(spec.test_fraction, spec.seed ^ 0x5eed_5eed);
    Ok(ds)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("IDX header is truncated"))
}

/// Parses an IDX image file: magic `0x00000803`, count, rows, cols, then bytes.
/// Pixels are scaled to `[0, 1]` and each image is flattened row-major.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f64>> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::format(format!("bad IDX image magic {magic:#010x}")));
    }
    let (n, r, c) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let pixels = n * r * c;
    let payload = &bytes[16..];
    if payload.len() != pixels {
        return Err(Error::format(format!("IDX image payload holds {} bytes, expected {pixels}", payload.len())));
    }
    if pixels == 0 {
        return Err(Error::format("IDX image file holds no pixels"));
    }
    Tensor::matrix(n, r * c, payload.iter().map(|&p| p as f64 / 255.0).collect())
}

/// Parses an IDX label file: magic `0x00000801`, count, then bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::format(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(format!("IDX label payload holds {} bytes, expected {n}", payload.len())));
    }
    Ok(payload.iter().map(|&l| l as usize).collect())
}

/// Loads a paired image/label IDX file set. The class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&std::fs::read(images)?)?;
    let y = parse_idx_labels(&std::fs::read(labels)?)?;
    if x.rows() != y.len() {
        return Err(Error::format(format!("{} images but {} labels", x.rows(), y.len())));
    }
    let classes = y.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(x, y, None, classes)
}

/// Encodes images (values in `[0, 1]`) as an IDX image file.
pub fn encode_idx_images(images: &Tensor<f64>, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if images.cols() != rows * cols {
        return Err(Error::shape("image width does not match rows × cols"));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [0x0803u32, images.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&0x0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
