//! Datasets: the MNIST IDX loader, synthetic Gaussian blobs, batching and
//! evaluation helpers.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::network::MaskedNetwork;
use crate::rng::{derive, Stream};
use crate::tensor::Tensor;

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// One labelled split; `images` is row-major `[len, example_shape...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub example_shape: Vec<usize>,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.example_shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let d = self.example_len();
        &self.images[i * d..(i + 1) * d]
    }

    /// Gathers the given examples into a `[n, features]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.example_len();
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.example(i));
            y.push(self.labels[i]);
        }
        let t = Tensor::new(vec![indices.len(), d], x).expect("batch shape");
        (t, y)
    }

    /// Contiguous examples `[start, end)` as a batch.
    pub fn range(&self, start: usize, end: usize) -> (Tensor, Vec<usize>) {
        let d = self.example_len();
        let t = Tensor::new(vec![end - start, d], self.images[start * d..end * d].to_vec())
            .expect("batch shape");
        (t, self.labels[start..end].to_vec())
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            example_shape: self.example_shape.clone(),
            images: self.images[..n * self.example_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
    /// Normalization applied to raw pixel intensities in `[0, 1]`.
    pub mean: f64,
    pub std: f64,
}

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| idx_err(path, "truncated header"))
}

/// Parses an IDX image file into raw bytes plus `(count, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(idx_err(path, format!("bad magic 0x{magic:08x} for images")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(idx_err(
            path,
            format!("expected {} pixel bytes, found {}", n * rows * cols, body.len()),
        ));
    }
    Ok((body.to_vec(), n, rows, cols))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(idx_err(path, format!("bad magic 0x{magic:08x} for labels")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(idx_err(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| idx_err(path, e.to_string()))
}

fn load_split(dir: &Path, prefix: &str) -> Result<Split> {
    let ipath: PathBuf = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lpath: PathBuf = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (pixels, n, rows, cols) = parse_idx_images(&read(&ipath)?, &ipath)?;
    let labels = parse_idx_labels(&read(&lpath)?, &lpath)?;
    if labels.len() != n {
        return Err(idx_err(
            &lpath,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(idx_err(&lpath, format!("label {bad} out of range")));
    }
    Ok(Split {
        example_shape: vec![1, rows, cols],
        images: pixels
            .iter()
            .map(|&p| (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD)
            .collect(),
        labels: labels.into_iter().map(usize::from).collect(),
    })
}

/// Loads the four standard MNIST IDX files from `dir`, standardizing pixels.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let train = load_split(dir, "train")?;
    let test = load_split(dir, "t10k")?;
    Ok(Dataset {
        train,
        test,
        classes: 10,
        mean: MNIST_MEAN,
        std: MNIST_STD,
    })
}

/// Gaussian-blob classification data with unit within-class noise and
/// class centres drawn with standard deviation `separation`. Class counts
/// differ by at most one. The test split holds `max(n / 5, classes)`
/// examples from the same centres.
pub fn make_synthetic_with(
    n: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("synthetic data needs at least two classes".into()));
    }
    if dim == 0 || n == 0 {
        return Err(Error::Config("synthetic data needs n >= 1 and dim >= 1".into()));
    }
    let mut rng = derive(seed, Stream::Data, 0);
    let centres: Vec<f64> = (0..classes * dim)
        .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut split = |count: usize| {
        let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let mut images = Vec::with_capacity(count * dim);
        for &y in &labels {
            for k in 0..dim {
                images.push(centres[y * dim + k] + rng.sample::<f64, _>(StandardNormal));
            }
        }
        Split {
            example_shape: vec![dim],
            images,
            labels,
        }
    };
    let train = split(n);
    let test = split((n / 5).max(classes));
    Ok(Dataset {
        train,
        test,
        classes,
        mean: 0.0,
        std: 1.0,
    })
}

pub fn make_synthetic(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_with(n, classes, dim, 3.0, seed)
}

/// Loss and accuracy of a network on a split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub const EVAL_CHUNK: usize = 1000;

/// Row-wise softmax probabilities for every example, `[len * classes]`.
pub fn predict_proba(net: &MaskedNetwork, split: &Split) -> Result<Vec<f64>> {
    let c = net.classes();
    let mut out = Vec::with_capacity(split.len() * c);
    let mut start = 0;
    while start < split.len() {
        let end = (start + EVAL_CHUNK).min(split.len());
        let (x, _) = split.range(start, end);
        let logits = net.logits(&x)?;
        for row in logits.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out.extend(row.iter().map(|v| (v - m).exp() / z));
        }
        start = end;
    }
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(net: &MaskedNetwork, split: &Split) -> Result<Evaluation> {
    let c = net.classes();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut start = 0;
    while start < split.len() {
        let end = (start + EVAL_CHUNK).min(split.len());
        let (x, y) = split.range(start, end);
        let logits = net.logits(&x)?;
        for (row, &label) in logits.data().chunks(c).zip(&y) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            if argmax(row) == label {
                correct += 1;
            }
        }
        start = end;
    }
    let n = split.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(body);
        b
    }

    #[test]
    fn parses_small_idx() {
        let p = Path::new("mem");
        let (px, n, r, c) = parse_idx_images(&idx_images(2, 2, 2, &[0, 1, 2, 3, 4, 5, 6, 7]), p).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(px[7], 7);
        assert!(parse_idx_images(&idx_images(2, 2, 2, &[0; 7]), p).is_err());
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad, p), Err(Error::Idx { .. })));
        let mut labels = LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        assert_eq!(parse_idx_labels(&labels, p).unwrap(), vec![1, 2, 3]);
        assert!(parse_idx_labels(&labels[..5], p).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = make_synthetic(103, 4, 5, 9).unwrap();
        let b = make_synthetic(103, 4, 5, 9).unwrap();
        assert_eq!(a, b);
        let mut counts = [0; 4];
        for &l in &a.train.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [26, 26, 26, 25]);
        assert!(make_synthetic(10, 1, 5, 0).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
