//! Datasets: IDX image files, synthetic bit patterns, standardization and
//! seeded train/validation splits.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Head;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw 8-bit images from an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// `[count, rows, cols]` with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor::new(vec![self.count, self.rows, self.cols], data).expect("header matches payload")
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::format(path, format!("truncated header: expected {need} bytes, found {}", bytes.len())));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(Error::format(path, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let shape: Vec<usize> = (1..=dims).map(|i| word(i) as usize).collect();
    let expected = need + shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload size mismatch: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(shape)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let shape = header(path, &bytes, IDX_IMAGES_MAGIC, 3)?;
    Ok(IdxImages { count: shape[0], rows: shape[1], cols: shape[2], pixels: bytes[16..].to_vec() })
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    header(path, &bytes, IDX_LABELS_MAGIC, 1)?;
    Ok(bytes[8..].to_vec())
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::Invalid(format!("{} pixels for {}x{}x{}", images.pixels.len(), images.count, images.rows, images.cols)));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// `1` where the value is at least `threshold`, else `0`.
pub fn binarize(t: &Tensor, threshold: f64) -> Tensor {
    t.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// `P` distinct `d`-bit patterns with uniform sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBits {
    pub dim: usize,
    pub patterns: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

pub fn make_synthetic_bits(count: usize, dim: usize, seed: u64) -> Result<SyntheticBits> {
    if dim == 0 || dim > 64 {
        return Err(Error::Invalid(format!("pattern dimension {dim} outside 1..=64")));
    }
    let space = 2f64.powi(dim as i32);
    if count == 0 || count as f64 > space {
        return Err(Error::Invalid(format!("cannot draw {count} distinct patterns from 2^{dim}")));
    }
    let mut rng = stream(seed, 0, Purpose::Synthetic, 0, 0);
    let words: Vec<u64> = if dim <= 20 {
        let mut all: Vec<u64> = (0..1u64 << dim).collect();
        all.shuffle(&mut rng);
        all.truncate(count);
        all
    } else {
        let mask = if dim == 64 { u64::MAX } else { (1u64 << dim) - 1 };
        let mut seen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let w = rng.random::<u64>() & mask;
            if seen.insert(w) {
                out.push(w);
            }
        }
        out
    };
    let patterns = words.iter().map(|w| (0..dim).map(|b| ((w >> b) & 1) as f64).collect()).collect();
    Ok(SyntheticBits { dim, patterns, weights: vec![1.0 / count as f64; count] })
}

impl SyntheticBits {
    /// `n` rows drawn with the sampling weights, `[n, d]`.
    pub fn sample(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, 1, Purpose::Synthetic, 0, 0);
        let cdf: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let total = *cdf.last().expect("nonempty");
        let mut data = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let u = rng.random::<f64>() * total;
            let i = cdf.iter().position(|c| u < *c).unwrap_or(cdf.len() - 1);
            data.extend_from_slice(&self.patterns[i]);
        }
        Tensor::new(vec![n, self.dim], data).expect("shape")
    }
}

/// Per-channel mean and standard deviation of rows of `[N, D]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics of `train`; constant channels get `std = 1`.
    pub fn fit(train: &Tensor) -> Result<Self> {
        let (n, d) = rows_cols(train)?;
        if n == 0 {
            return Err(Error::Invalid("cannot standardize an empty set".into()));
        }
        let mut mean = vec![0.0; d];
        for row in train.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in train.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n as f64).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let (_, d) = rows_cols(t)?;
        if d != self.mean.len() {
            return Err(Error::Invalid(format!("{d} channels, statistics for {}", self.mean.len())));
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Standardizes `train` with its own statistics and `val` with the same ones.
pub fn standardize(train: &Tensor, val: &Tensor) -> Result<(Tensor, Tensor, Standardizer)> {
    let s = Standardizer::fit(train)?;
    Ok((s.apply(train)?, s.apply(val)?, s))
}

fn rows_cols(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::Invalid(format!("expected [N, D] rows, got {s:?}"))),
    }
}

/// Seeded shuffle of `0..n` split into (train, validation).
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, 0, Purpose::Split, 0, 0));
    let n_val = ((n as f64) * val_fraction).round().clamp(1.0, (n.max(2) - 1) as f64) as usize;
    if n < 2 {
        return Err(Error::Invalid(format!("cannot split {n} rows")));
    }
    let train = idx.split_off(n_val);
    Ok((train, idx))
}

pub fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let d = t.numel() / t.shape()[0].max(1);
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
    }
    Tensor::new(vec![rows.len(), d], data).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticBits,
    IdxImages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// IDX image file; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Keep only the first `limit` images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Rows drawn from the synthetic patterns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binarize: Option<f64>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.1
}

/// Flattened `[N, D]` train and validation rows plus the matching decoder head.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Tensor,
    pub val: Tensor,
    pub head: Head,
    pub standardizer: Option<Standardizer>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.shape()[1]
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if let Some(t) = self.binarize {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("binarize threshold {t} outside [0, 1]")));
            }
        }
        match self.kind {
            DatasetKind::IdxImages if self.path.is_none() => Err(Error::Config("idx_images needs `path`".into())),
            DatasetKind::SyntheticBits if self.patterns.is_none() || self.dim.is_none() => {
                Err(Error::Config("synthetic_bits needs `patterns` and `dim`".into()))
            }
            _ => Ok(()),
        }
    }

    /// Decoder head for this data: Bernoulli for bits and binarized images.
    pub fn head(&self) -> Head {
        match (self.kind, self.binarize) {
            (DatasetKind::SyntheticBits, _) | (DatasetKind::IdxImages, Some(_)) => Head::Bernoulli,
            (DatasetKind::IdxImages, None) => Head::Gaussian,
        }
    }

    pub fn load(&self, base: &Path) -> Result<Dataset> {
        self.validate()?;
        let mut rows = match self.kind {
            DatasetKind::SyntheticBits => {
                let bits = make_synthetic_bits(self.patterns.unwrap_or(0), self.dim.unwrap_or(0), self.seed)?;
                bits.sample(self.samples.unwrap_or(1024), self.seed)
            }
            DatasetKind::IdxImages => {
                let p = self.path.as_ref().expect("validated");
                let p = if p.is_relative() { base.join(p) } else { p.clone() };
                let img = load_idx_images(&p)?;
                let n = self.limit.map_or(img.count, |l| l.min(img.count));
                let d = img.rows * img.cols;
                let t = img.to_tensor();
                Tensor::new(vec![n, d], t.data()[..n * d].to_vec())?
            }
        };
        if let Some(th) = self.binarize {
            rows = binarize(&rows, th);
        }
        let (tr, va) = split_indices(rows.shape()[0], self.val_fraction, self.seed)?;
        let (mut train, mut val) = (select_rows(&rows, &tr), select_rows(&rows, &va));
        let mut standardizer = None;
        if self.standardize {
            if self.head() == Head::Bernoulli {
                return Err(Error::Config("standardize applies to continuous (non-binarized) data only".into()));
            }
            let (a, b, s) = standardize(&train, &val)?;
            (train, val, standardizer) = (a, b, Some(s));
        }
        Ok(Dataset { train, val, head: self.head(), standardizer })
    }
}

/// Per-dimension Bernoulli NLL of `val` under the train pixel means, in nats.
pub fn constant_predictor_nll(train: &Tensor, val: &Tensor) -> Result<f64> {
    let (n, d) = rows_cols(train)?;
    let (m, _) = rows_cols(val)?;
    let mut p = vec![0.0; d];
    for row in train.data().chunks(d) {
        for (a, v) in p.iter_mut().zip(row) {
            *a += v / n as f64;
        }
    }
    let eps = 1e-12;
    let mut total = 0.0;
    for row in val.data().chunks(d) {
        for (x, p) in row.iter().zip(&p) {
            let p = p.clamp(eps, 1.0 - eps);
            total -= x * p.ln() + (1.0 - x) * (1.0 - p).ln();
        }
    }
    Ok(total / (m * d) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> IdxImages {
        let pixels = (0..4 * 28 * 28).map(|i| ((i * 37) % 256) as u8).collect();
        IdxImages { count: 4, rows: 28, cols: 28, pixels }
    }

    #[test]
    fn idx_round_trip_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.idx");
        write_idx_images(&p, &fixture()).unwrap();
        let back = load_idx_images(&p).unwrap();
        assert_eq!(back, fixture());
        let t = back.to_tensor();
        assert_eq!(t.shape(), [4, 28, 28]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let lp = dir.path().join("lab.idx");
        write_idx_labels(&lp, &[3, 1, 4, 1]).unwrap();
        assert_eq!(load_idx_labels(&lp).unwrap(), vec![3, 1, 4, 1]);
    }

    #[test]
    fn hand_built_bytes_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hand.idx");
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 28, 0, 0, 0, 28];
        bytes.extend(std::iter::repeat_n(255u8, 4 * 784));
        fs::write(&p, bytes).unwrap();
        let img = load_idx_images(&p).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (4, 28, 28));
        assert!(img.to_tensor().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.idx");
        write_idx_images(&p, &fixture()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(1000);
        fs::write(&p, &bytes).unwrap();
        let msg = load_idx_images(&p).unwrap_err().to_string();
        assert!(msg.contains(&(16 + 4 * 784).to_string()) && msg.contains("1000"), "{msg}");
        bytes[3] = 0x01;
        fs::write(&p, &bytes).unwrap();
        assert!(load_idx_images(&p).unwrap_err().to_string().contains("magic"));
        assert!(matches!(load_idx_images(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn binarize_gives_zeros_and_ones() {
        let b = binarize(&fixture().to_tensor(), 0.4);
        assert!(b.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(b.data().contains(&0.0) && b.data().contains(&1.0));
    }

    #[test]
    fn synthetic_patterns() {
        let all = make_synthetic_bits(16, 4, 3).unwrap();
        let mut words: Vec<Vec<u8>> = all.patterns.iter().map(|p| p.iter().map(|v| *v as u8).collect()).collect();
        words.sort();
        words.dedup();
        assert_eq!(words.len(), 16);
        assert_eq!(make_synthetic_bits(16, 8, 9).unwrap(), make_synthetic_bits(16, 8, 9).unwrap());
        assert_ne!(make_synthetic_bits(16, 8, 9).unwrap(), make_synthetic_bits(16, 8, 10).unwrap());
        let p = make_synthetic_bits(16, 8, 1).unwrap();
        let set: HashSet<Vec<u64>> = p.patterns.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(set.len(), 16);
        assert!(p.patterns.iter().all(|r| r.len() == 8 && r.iter().all(|v| *v == 0.0 || *v == 1.0)));
        assert!(make_synthetic_bits(17, 4, 0).is_err());
        assert_eq!(make_synthetic_bits(50, 40, 0).unwrap().patterns.len(), 50);
    }

    #[test]
    fn standardize_examples() {
        let train = Tensor::new(vec![4, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]).unwrap();
        let (a, _, s) = standardize(&train, &train).unwrap();
        assert_eq!(s.std[1], 1.0);
        assert!(a.data().chunks(2).all(|r| r[1] == 0.0));
        let (b, _, _) = standardize(&a, &a).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
        // Ten {0, 1} pixels with mean 0.3.
        let bits = Tensor::new(vec![10, 1], vec![1., 0., 0., 1., 0., 0., 1., 0., 0., 0.]).unwrap();
        let (z, _, s) = standardize(&bits, &bits).unwrap();
        assert!((s.mean[0] - 0.3).abs() < 1e-15);
        let mean: f64 = z.data().iter().sum::<f64>() / 10.0;
        let var: f64 = z.data().iter().map(|v| v * v).sum::<f64>() / 10.0;
        assert!(mean.abs() < 1e-10 && (var.sqrt() - 1.0).abs() < 1e-10);
        assert!(Standardizer::fit(&Tensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let (a, b) = split_indices(100, 0.1, 5).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(100, 0.1, 5).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_indices(100, 1.0, 5).is_err());
    }

    #[test]
    fn constant_predictor_matches_entropy() {
        let train = Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let nll = constant_predictor_nll(&train, &train).unwrap();
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((nll - h).abs() < 1e-12);
    }
}
