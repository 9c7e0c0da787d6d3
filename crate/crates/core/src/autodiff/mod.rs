//! Reverse-mode differentiation of masked networks.

mod tape;

use std::ops::Deref;

pub use tape::{Padding, ParamGrads, Tape, Var};

use crate::error::{Error, Result};
use crate::network::MaskedNetwork;
use crate::tensor::Tensor;

/// One entry per trainable parameter in canonical order; masked-out
/// weights are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn squared_norm(&self) -> f64 {
        crate::tensor::squared_norm(&self.0)
    }
}

impl Deref for GradientVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Masked gradient plus the dense gradient `dL/d(w*m)` that gradient-based
/// growth criteria read at inactive positions.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub masked: GradientVector,
    pub dense: Vec<f64>,
}

fn flatten(parts: Vec<Tensor>) -> Vec<f64> {
    let n = parts.iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    out
}

/// Mean softmax cross-entropy of `net` on a labelled batch, with the tape
/// needed to differentiate it.
pub fn forward(net: &MaskedNetwork, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tape)> {
    let f = net.record(batch, Some(labels))?;
    let loss = f.tape.output()?;
    Ok((loss, f.tape))
}

pub fn backward(tape: &mut Tape) -> Result<GradientVector> {
    Ok(backward_full(tape)?.masked)
}

pub fn backward_full(tape: &mut Tape) -> Result<Gradient> {
    let g = tape.backward()?;
    let dense = flatten(g.dense);
    let masked = flatten(g.masked);
    if !dense.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(Gradient {
        masked: GradientVector(masked),
        dense,
    })
}

pub fn loss_and_gradient(
    net: &MaskedNetwork,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, Gradient)> {
    let (loss, mut tape) = forward(net, batch, labels)?;
    Ok((loss, backward_full(&mut tape)?))
}

/// Splits a full-length parameter direction into per-tensor pieces in
/// registration order.
fn split_direction(net: &MaskedNetwork, full: &[f64]) -> Vec<Tensor> {
    let mut parts = Vec::new();
    let mut off = 0;
    for l in net.weighted() {
        let n = l.len();
        parts.push(Tensor::from_vec(full[off..off + n].to_vec()));
        off += n;
        if let Some(b) = l.bias() {
            parts.push(Tensor::from_vec(full[off..off + b.len()].to_vec()));
            off += b.len();
        }
    }
    parts
}

/// Hessian-vector product on an already recorded tape. `v` and the result
/// live on the active coordinates listed by `active`.
pub fn hvp_on_tape(
    net: &MaskedNetwork,
    tape: &Tape,
    active: &[usize],
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != active.len() {
        return Err(Error::Dimension {
            expected: active.len(),
            got: v.len(),
        });
    }
    let mut full = vec![0.0; net.param_count()];
    for (&i, &x) in active.iter().zip(v) {
        full[i] = x;
    }
    let (_, hv) = tape.hvp(&split_direction(net, &full))?;
    let hv = flatten(hv);
    Ok(active.iter().map(|&i| hv[i]).collect())
}

/// Masked gradient at the active coordinates, read from a recorded tape
/// without consuming it.
pub fn gradient_on_tape(net: &MaskedNetwork, tape: &Tape, active: &[usize]) -> Result<Vec<f64>> {
    let zero = vec![0.0; net.param_count()];
    let (g, _) = tape.hvp(&split_direction(net, &zero))?;
    let g = flatten(g);
    Ok(active.iter().map(|&i| g[i]).collect())
}

/// `H(theta) v` restricted to the active coordinates of `net`
/// (`v.len() == net.active_indices().len()`).
pub fn hvp(net: &MaskedNetwork, batch: &Tensor, labels: &[usize], v: &[f64]) -> Result<Vec<f64>> {
    let active = net.active_indices();
    let (_, tape) = forward(net, batch, labels)?;
    hvp_on_tape(net, &tape, &active, v)
}
