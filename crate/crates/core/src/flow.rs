//! Gradient-flow measurements and dense Hessian spectra over active
//! coordinates.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::autodiff::{backward_full, forward, gradient_on_tape, hvp_on_tape, Gradient, Tape};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::network::MaskedNetwork;
use crate::tensor::Tensor;

/// Default upper bound on active coordinates for a dense Hessian.
pub const HESSIAN_CAP: usize = 5000;
/// Grid resolution of the spectral density.
pub const DENSITY_POINTS: usize = 2001;
/// Bandwidth as a fraction of the eigenvalue range.
pub const BANDWIDTH_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowTag {
    PreUpdate,
    PostUpdate,
    Periodic,
}

impl FlowTag {
    pub fn name(self) -> &'static str {
        match self {
            FlowTag::PreUpdate => "pre-update",
            FlowTag::PostUpdate => "post-update",
            FlowTag::Periodic => "periodic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradFlowRecord {
    pub step: u64,
    /// Squared norm of the masked gradient.
    pub grad_flow: f64,
    /// `grad_flow` divided by the number of active parameters.
    pub per_param: f64,
    pub tag: FlowTag,
    pub batch: String,
}

/// `g^T g` for the masked gradient of the mean loss on a batch.
pub fn gradient_flow(net: &MaskedNetwork, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let (_, mut tape) = forward(net, batch, labels)?;
    Ok(backward_full(&mut tape)?.masked.squared_norm())
}

pub fn flow_record(
    net: &MaskedNetwork,
    batch: &Tensor,
    labels: &[usize],
    tag: FlowTag,
    batch_id: impl Into<String>,
) -> Result<GradFlowRecord> {
    let grad_flow = gradient_flow(net, batch, labels)?;
    let active = net.active_indices().len().max(1);
    Ok(GradFlowRecord {
        step: net.step,
        grad_flow,
        per_param: grad_flow / active as f64,
        tag,
        batch: batch_id.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowDelta {
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

/// Gradient flow on one batch before and after `update`, which receives the
/// network and its gradient on that same batch.
pub fn mask_update_delta<R>(
    net: &mut MaskedNetwork,
    batch: &Tensor,
    labels: &[usize],
    update: impl FnOnce(&mut MaskedNetwork, &Gradient) -> Result<R>,
) -> Result<(FlowDelta, R)> {
    let (_, mut tape) = forward(net, batch, labels)?;
    let g = backward_full(&mut tape)?;
    let before = g.masked.squared_norm();
    let out = update(net, &g)?;
    let after = gradient_flow(net, batch, labels)?;
    Ok((
        FlowDelta {
            before,
            after,
            delta: after - before,
        },
        out,
    ))
}

/// A twice-differentiable scalar function of a parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn gradient(&self) -> Result<Vec<f64>>;
    fn hvp(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Mean loss of a network over a dataset, restricted to its active
/// coordinates. One tape per chunk is kept so products reuse the forward
/// pass.
pub struct NetworkObjective<'a> {
    net: &'a MaskedNetwork,
    active: Vec<usize>,
    tapes: Vec<(Tape, f64)>,
}

impl<'a> NetworkObjective<'a> {
    pub fn new(net: &'a MaskedNetwork, data: &Split, chunk: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("objective needs at least one example".into()));
        }
        let chunk = chunk.max(1);
        let mut tapes = Vec::new();
        let mut start = 0;
        while start < data.len() {
            let end = (start + chunk).min(data.len());
            let (x, y) = data.range(start, end);
            let (_, tape) = forward(net, &x, &y)?;
            tapes.push((tape, (end - start) as f64 / data.len() as f64));
            start = end;
        }
        Ok(Self {
            net,
            active: net.active_indices(),
            tapes,
        })
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn loss(&self) -> Result<f64> {
        let mut l = 0.0;
        for (t, w) in &self.tapes {
            l += w * t.output()?;
        }
        Ok(l)
    }
}

impl Objective for NetworkObjective<'_> {
    fn dim(&self) -> usize {
        self.active.len()
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.active.len()];
        for (tape, w) in &self.tapes {
            let full = gradient_on_tape(self.net, tape, &self.active)?;
            for (a, b) in g.iter_mut().zip(full) {
                *a += w * b;
            }
        }
        Ok(g)
    }

    fn hvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.active.len()];
        for (tape, w) in &self.tapes {
            let hv = hvp_on_tape(self.net, tape, &self.active, v)?;
            for (a, b) in out.iter_mut().zip(hv) {
                *a += w * b;
            }
        }
        Ok(out)
    }
}

/// `0.5 (theta - c)^T A (theta - c)` with symmetric `A`, differentiated
/// through the tape.
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub theta: Vec<f64>,
    pub centre: Vec<f64>,
}

impl Quadratic {
    fn tape(&self) -> Result<Tape> {
        let n = self.theta.len();
        let mut tape = Tape::new();
        let shifted: Vec<f64> = self.theta.iter().zip(&self.centre).map(|(t, c)| t - c).collect();
        let x = tape.param(&Tensor::from_vec(shifted), None)?;
        let a = Tensor::new(vec![n, n], self.a.transpose().as_slice().to_vec())?;
        tape.half_quadratic(x, Some(&a))?;
        Ok(tape)
    }

    pub fn loss(&self) -> Result<f64> {
        self.tape()?.output()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        let g = self.tape()?.backward()?;
        Ok(g.masked[0].data().to_vec())
    }

    fn hvp(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let (_, hv) = self.tape()?.hvp(&[Tensor::from_vec(v.to_vec())])?;
        Ok(hv[0].data().to_vec())
    }
}

/// Assembles the Hessian column by column from products with basis
/// vectors.
pub fn hessian_of(obj: &impl Objective, cap: usize) -> Result<DMatrix<f64>> {
    let n = obj.dim();
    if n > cap {
        return Err(Error::HessianCap { active: n, cap });
    }
    let mut h = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = obj.hvp(&e)?;
        e[j] = 0.0;
        h.set_column(j, &nalgebra::DVector::from_vec(col));
    }
    Ok(h)
}

/// Hessian of the mean loss over `data` with respect to the active
/// coordinates of `net` (active weights followed by biases, canonical
/// order).
pub fn full_hessian(net: &MaskedNetwork, data: &Split, cap: usize) -> Result<DMatrix<f64>> {
    let n = net.active_indices().len();
    if n > cap {
        return Err(Error::HessianCap { active: n, cap });
    }
    let obj = NetworkObjective::new(net, data, 1000)?;
    hessian_of(&obj, cap)
}

pub fn symmetry_defect(h: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..h.nrows() {
        for j in 0..i {
            worst = worst.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumEstimate {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub sigma: f64,
    /// `(lambda, density)` on a uniform grid.
    pub density: Vec<(f64, f64)>,
}

impl SpectrumEstimate {
    pub fn min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn max(&self) -> f64 {
        *self.eigenvalues.last().unwrap()
    }

    /// Magnitude of the most negative eigenvalue, zero when there is none.
    pub fn largest_negative(&self) -> f64 {
        largest_negative(&self.eigenvalues)
    }

    /// Trapezoid integral of the density.
    pub fn integral(&self) -> f64 {
        self.density
            .windows(2)
            .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
            .sum()
    }
}

pub fn largest_negative(eigenvalues: &[f64]) -> f64 {
    let m = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if m < 0.0 {
        -m
    } else {
        0.0
    }
}

/// Per-step magnitude of the most negative eigenvalue.
pub fn largest_negative_track(spectra: &[(u64, SpectrumEstimate)]) -> Vec<(u64, f64)> {
    spectra
        .iter()
        .map(|(t, s)| (*t, s.largest_negative()))
        .collect()
}

/// Gaussian-kernel density of `eigenvalues` on `points` grid points over
/// `[min - 3 sigma, max + 3 sigma]`.
pub fn kernel_density(eigenvalues: &[f64], sigma: f64, points: usize) -> Vec<(f64, f64)> {
    let lo = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * sigma;
    let hi = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * sigma;
    let n = eigenvalues.len() as f64;
    let norm = 1.0 / (n * sigma * (2.0 * std::f64::consts::PI).sqrt());
    let points = points.max(2);
    (0..points)
        .map(|k| {
            let x = lo + (hi - lo) * k as f64 / (points - 1) as f64;
            let d: f64 = eigenvalues
                .iter()
                .map(|l| (-(x - l).powi(2) / (2.0 * sigma * sigma)).exp())
                .sum();
            (x, norm * d)
        })
        .collect()
}

/// Eigenvalues of a symmetric matrix plus their smoothed density. `sigma`
/// defaults to a hundredth of the eigenvalue range.
pub fn spectrum(h: &DMatrix<f64>, sigma: Option<f64>) -> Result<SpectrumEstimate> {
    if h.nrows() != h.ncols() || h.nrows() == 0 {
        return Err(Error::shape("spectrum", format!("{}x{} matrix", h.nrows(), h.ncols())));
    }
    let scale = h.amax().max(1.0);
    let defect = symmetry_defect(h);
    if defect > 1e-7 * scale {
        return Err(Error::NotSymmetric(defect));
    }
    let sym = (h + h.transpose()) * 0.5;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().cloned().collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let range = eigenvalues[eigenvalues.len() - 1] - eigenvalues[0];
    let sigma = match sigma {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(Error::Config(format!("bandwidth must be positive, got {s}"))),
        None if range > 0.0 => BANDWIDTH_FRACTION * range,
        None => BANDWIDTH_FRACTION * eigenvalues[0].abs().max(1.0),
    };
    let density = kernel_density(&eigenvalues, sigma, DENSITY_POINTS);
    Ok(SpectrumEstimate {
        eigenvalues,
        sigma,
        density,
    })
}
