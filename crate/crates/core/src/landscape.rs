//! Relationships between solutions that share one mask: parameter-space
//! distances, linear interpolation, MDS layouts and function similarity.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::data::{argmax, evaluate, Split};
use crate::error::{Error, Result};
use crate::network::MaskedNetwork;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointLabel {
    LtInit,
    LtSoln,
    ScratchInit,
    ScratchSoln,
    PrunedSoln,
}

impl PointLabel {
    pub fn name(self) -> &'static str {
        match self {
            PointLabel::LtInit => "lt-init",
            PointLabel::LtSoln => "lt-soln",
            PointLabel::ScratchInit => "scratch-init",
            PointLabel::ScratchSoln => "scratch-soln",
            PointLabel::PrunedSoln => "pruned-soln",
        }
    }
}

/// Active parameters (weights under the mask, then biases, canonical
/// order) of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPoint {
    pub label: PointLabel,
    pub seed: u64,
    pub coords: Vec<f64>,
    mask: Vec<bool>,
}

impl ParamPoint {
    pub fn from_network(net: &MaskedNetwork, label: PointLabel, seed: u64) -> Self {
        let params = net.params();
        let mask = net.param_mask();
        let coords = params
            .iter()
            .zip(&mask)
            .filter_map(|(&p, &m)| m.then_some(p))
            .collect();
        Self {
            label,
            seed,
            coords,
            mask,
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn check(&self, other: &ParamPoint) -> Result<()> {
        if self.mask != other.mask {
            return Err(Error::MaskMismatch);
        }
        Ok(())
    }

    /// Writes this point into `net`, which must carry the same mask.
    pub fn load_into(&self, net: &mut MaskedNetwork) -> Result<()> {
        if net.param_mask() != self.mask {
            return Err(Error::MaskMismatch);
        }
        let mut full = vec![0.0; self.mask.len()];
        let mut it = self.coords.iter();
        for (v, &m) in full.iter_mut().zip(&self.mask) {
            if m {
                *v = *it.next().expect("coordinate count matches mask");
            }
        }
        net.set_params(&full)
    }
}

pub fn l2_distance(a: &ParamPoint, b: &ParamPoint) -> Result<f64> {
    a.check(b)?;
    Ok(a.coords
        .iter()
        .zip(&b.coords)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InterpolationPoint {
    pub alpha: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// `n` evenly spaced values covering `[0, 1]`.
pub fn alpha_grid(n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Loss and accuracy along `(1 - alpha) a + alpha b`, evaluated with the
/// architecture and mask of `template`.
pub fn interpolate_loss(
    a: &ParamPoint,
    b: &ParamPoint,
    template: &MaskedNetwork,
    grid: &[f64],
    data: &Split,
) -> Result<Vec<InterpolationPoint>> {
    a.check(b)?;
    if grid.is_empty() {
        return Err(Error::Config("interpolation grid is empty".into()));
    }
    let mut net = template.clone();
    let mut out = Vec::with_capacity(grid.len());
    for &alpha in grid {
        // a + alpha (b - a), with both endpoints taken verbatim so they
        // agree bit-for-bit with direct evaluation and a == b stays flat.
        let p = if alpha == 1.0 {
            b.clone()
        } else {
            let mut p = a.clone();
            for (c, y) in p.coords.iter_mut().zip(&b.coords) {
                *c += alpha * (y - *c);
            }
            p
        };
        p.load_into(&mut net)?;
        let e = evaluate(&net, data)?;
        out.push(InterpolationPoint {
            alpha,
            loss: e.loss,
            accuracy: e.accuracy,
        });
    }
    Ok(out)
}

/// Largest rise of a loss curve above the higher of its two endpoints.
pub fn barrier(curve: &[InterpolationPoint]) -> f64 {
    let ends = curve[0].loss.max(curve[curve.len() - 1].loss);
    curve.iter().map(|p| p.loss - ends).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdsEmbedding {
    /// One row of `dim` coordinates per point.
    pub coords: Vec<Vec<f64>>,
    /// Pairwise distances between embedded points.
    pub fitted: DMatrix<f64>,
    /// `sqrt(sum (fitted - d)^2 / sum d^2)` over pairs.
    pub stress: f64,
}

/// Classical (Torgerson) scaling of a distance matrix.
pub fn mds_from_distances(d: &DMatrix<f64>, dim: usize) -> Result<MdsEmbedding> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(Error::shape("mds", "distance matrix must be square"));
    }
    if n < dim + 1 {
        return Err(Error::Config(format!("{n} points cannot be embedded in {dim} dimensions")));
    }
    let d2 = d.map(|x| x * x);
    let row_means: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap().then(i.cmp(&j)));
    let mut coords = vec![vec![0.0; dim]; n];
    for (k, &e) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[e].max(0.0);
        let v = eig.eigenvectors.column(e);
        // Fix the sign so the largest component is positive.
        let pivot = (0..n)
            .max_by(|&i, &j| v[i].abs().partial_cmp(&v[j].abs()).unwrap().then(j.cmp(&i)))
            .unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][k] = sign * v[i] * lambda.sqrt();
        }
    }
    for k in 0..dim {
        let mean = coords.iter().map(|c| c[k]).sum::<f64>() / n as f64;
        for c in coords.iter_mut() {
            c[k] -= mean;
        }
    }
    let fitted = DMatrix::from_fn(n, n, |i, j| {
        coords[i]
            .iter()
            .zip(&coords[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    });
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..i {
            num += (fitted[(i, j)] - d[(i, j)]).powi(2);
            den += d[(i, j)].powi(2);
        }
    }
    let stress = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
    Ok(MdsEmbedding {
        coords,
        fitted,
        stress,
    })
}

pub fn distance_matrix(points: &[ParamPoint]) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = l2_distance(&points[i], &points[j])?;
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Joint MDS layout of parameter points sharing one mask.
pub fn mds_embed(points: &[ParamPoint], dim: usize) -> Result<MdsEmbedding> {
    mds_from_distances(&distance_matrix(points)?, dim)
}

/// Fraction of positions where two label sequences differ.
pub fn disagreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64)
}

/// Per-example class distributions of one model, `[examples * classes]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl Predictions {
    pub fn new(classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes == 0 || probs.len() % classes != 0 {
            return Err(Error::shape("predictions", format!("{} values for {classes} classes", probs.len())));
        }
        for (i, row) in probs.chunks(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Config(format!("example {i} is not a distribution (sum {s})")));
            }
        }
        Ok(Self { classes, probs })
    }

    pub fn examples(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.classes)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self.labels().iter().zip(labels).filter(|(a, b)| a == b).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

fn aligned(models: &[&Predictions]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::Config("no models".into()))?;
    for m in models {
        if m.classes != first.classes || m.examples() != first.examples() {
            return Err(Error::shape(
                "predictions",
                format!("{}x{} vs {}x{}", m.examples(), m.classes, first.examples(), first.classes),
            ));
        }
    }
    Ok(())
}

/// `sum_x sum_c p log(p / q)` in nats with `q` floored at [`PROB_FLOOR`];
/// also returns how many terms needed the floor.
pub fn kl_divergence(p: &Predictions, q: &Predictions) -> Result<(f64, usize)> {
    aligned(&[p, q])?;
    let mut total = 0.0;
    let mut floored = 0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi <= 0.0 {
            continue;
        }
        let q = if qi < PROB_FLOOR {
            floored += 1;
            PROB_FLOOR
        } else {
            qi
        };
        total += pi * (pi / q).ln();
    }
    Ok((total, floored))
}

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Generalized Jensen-Shannon divergence: entropy of the mean distribution
/// minus the mean entropy, summed over examples.
pub fn jsd(models: &[&Predictions]) -> Result<f64> {
    aligned(models)?;
    let c = models[0].classes;
    let n = models.len() as f64;
    let mut total = 0.0;
    for x in 0..models[0].examples() {
        let mut mean = vec![0.0; c];
        let mut mean_h = 0.0;
        for m in models {
            let row = &m.probs[x * c..(x + 1) * c];
            for (a, b) in mean.iter_mut().zip(row) {
                *a += b / n;
            }
            mean_h += entropy(row) / n;
        }
        total += (entropy(&mean) - mean_h).max(0.0);
    }
    Ok(total)
}

/// Accuracy of the argmax of the mean distribution.
pub fn ensemble_accuracy(models: &[&Predictions], labels: &[usize]) -> Result<f64> {
    aligned(models)?;
    let c = models[0].classes;
    if labels.len() != models[0].examples() {
        return Err(Error::Dimension {
            expected: models[0].examples(),
            got: labels.len(),
        });
    }
    let mut hits = 0;
    for (x, &y) in labels.iter().enumerate() {
        let mut mean = vec![0.0; c];
        for m in models {
            for (a, b) in mean.iter_mut().zip(&m.probs[x * c..(x + 1) * c]) {
                *a += b;
            }
        }
        if argmax(&mean) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub examples: usize,
    pub disagreement: Vec<Vec<f64>>,
    pub disagreement_with_pruned: Vec<f64>,
    pub kl: Vec<Vec<f64>>,
    pub kl_with_pruned: Vec<f64>,
    pub jsd: f64,
    pub jsd_with_pruned: f64,
    pub individual_accuracy: Vec<f64>,
    pub ensemble_accuracy: f64,
    /// Probability terms raised to the floor inside KL.
    pub floored: usize,
}

impl SimilarityReport {
    fn off_diagonal_mean(m: &[Vec<f64>]) -> f64 {
        let n = m.len();
        if n < 2 {
            return 0.0;
        }
        let s: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j]).sum();
        s / (n * (n - 1)) as f64
    }

    pub fn mean_pairwise_disagreement(&self) -> f64 {
        Self::off_diagonal_mean(&self.disagreement)
    }

    pub fn mean_pairwise_kl(&self) -> f64 {
        Self::off_diagonal_mean(&self.kl)
    }

    pub fn mean_individual_accuracy(&self) -> f64 {
        self.individual_accuracy.iter().sum::<f64>() / self.individual_accuracy.len().max(1) as f64
    }

    pub fn ensemble_gain(&self) -> f64 {
        self.ensemble_accuracy - self.mean_individual_accuracy()
    }
}

pub fn similarity_report(
    models: &[Predictions],
    pruned: &Predictions,
    labels: &[usize],
) -> Result<SimilarityReport> {
    let refs: Vec<&Predictions> = models.iter().collect();
    let mut all = refs.clone();
    all.push(pruned);
    aligned(&all)?;
    let preds: Vec<Vec<usize>> = models.iter().map(Predictions::labels).collect();
    let pruned_labels = pruned.labels();
    let n = models.len();
    let mut dis = vec![vec![0.0; n]; n];
    let mut kl = vec![vec![0.0; n]; n];
    let mut floored = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                dis[i][j] = disagreement(&preds[i], &preds[j])?;
                let (k, f) = kl_divergence(&models[i], &models[j])?;
                kl[i][j] = k;
                floored += f;
            }
        }
    }
    let mut kl_p = Vec::with_capacity(n);
    for m in models {
        let (k, f) = kl_divergence(m, pruned)?;
        kl_p.push(k);
        floored += f;
    }
    Ok(SimilarityReport {
        examples: pruned.examples(),
        disagreement_with_pruned: preds
            .iter()
            .map(|p| disagreement(p, &pruned_labels))
            .collect::<Result<_>>()?,
        disagreement: dis,
        kl,
        kl_with_pruned: kl_p,
        jsd: jsd(&refs)?,
        jsd_with_pruned: jsd(&all)?,
        individual_accuracy: models.iter().map(|m| m.accuracy(labels)).collect(),
        ensemble_accuracy: ensemble_accuracy(&refs, labels)?,
        floored,
    })
}
