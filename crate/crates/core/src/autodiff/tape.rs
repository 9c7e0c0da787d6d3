//! Reverse-mode differentiation over the layer primitives used by masked
//! networks.
//!
//! A [`Tape`] records every primitive together with its output value while
//! the forward pass runs. [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints. [`Tape::hvp`] runs a tangent (forward-mode) sweep
//! followed by a second-order reverse sweep, which yields exact
//! Hessian-vector products without finite differences.
//!
//! Parameters are registered with an optional binary mask. The recorded
//! value of a masked parameter is `w * m`, so stored values at masked-out
//! positions never reach the loss. Gradients are produced both densely
//! (`dL/d(w*m)`, needed by gradient-based growth) and masked.

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm, Tensor};

/// Handle to a value slot on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_image(&self) -> usize {
        self.out_c * self.positions()
    }

    fn col_image(&self) -> usize {
        self.patch() * self.positions()
    }

    /// Unfolds every image of `x` into a `(patch, positions)` column matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.batch * self.col_image()];
        let p = self.positions();
        for b in 0..self.batch {
            let img = &x[b * self.in_image()..(b + 1) * self.in_image()];
            let col = &mut cols[b * self.col_image()..(b + 1) * self.col_image()];
            for c in 0..self.in_c {
                for ki in 0..self.k {
                    for kj in 0..self.k {
                        let row = (c * self.k + ki) * self.k + kj;
                        let dst = &mut col[row * p..(row + 1) * p];
                        for oh in 0..self.out_h {
                            let ih = oh as isize + ki as isize - self.pad as isize;
                            if ih < 0 || ih >= self.in_h as isize {
                                continue;
                            }
                            let src_row = (c * self.in_h + ih as usize) * self.in_w;
                            for ow in 0..self.out_w {
                                let iw = ow as isize + kj as isize - self.pad as isize;
                                if iw >= 0 && iw < self.in_w as isize {
                                    dst[oh * self.out_w + ow] = img[src_row + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`] for a single image, accumulating.
    fn col2im_add(&self, col: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let ih = oh as isize + ki as isize - self.pad as isize;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        let dst_row = (c * self.in_h + ih as usize) * self.in_w;
                        for ow in 0..self.out_w {
                            let iw = ow as isize + kj as isize - self.pad as isize;
                            if iw >= 0 && iw < self.in_w as isize {
                                img[dst_row + iw as usize] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param {
        mask: Option<Vec<bool>>,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2 {
        x: Var,
        /// Flat index of the top-left input of each window.
        corners: Vec<usize>,
        width: usize,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    HalfQuadratic {
        x: Var,
        matrix: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of the tape output with respect to every registered parameter,
/// in registration order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    /// `dL/d(w*m)` at every position, including masked-out ones.
    pub dense: Vec<Tensor>,
    /// `dense` with masked-out positions forced to zero.
    pub masked: Vec<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    consumed: bool,
}

fn acc<'a>(slots: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'a mut Tensor {
    slots[v.0].get_or_insert_with(|| nodes[v.0].value.zeros_like())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Scalar value of the last recorded node.
    pub fn output(&self) -> Result<f64> {
        let node = self
            .nodes
            .last()
            .ok_or_else(|| Error::shape("Tape::output", "empty tape"))?;
        if node.value.len() != 1 {
            return Err(Error::shape(
                "Tape::output",
                format!("output has shape {:?}, expected a scalar", node.value.shape()),
            ));
        }
        Ok(node.value.data()[0])
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("tape input".into()));
        }
        Ok(self.push(Op::Input, value))
    }

    /// Registers a trainable parameter. When `mask` is given the recorded
    /// value is the parameter with masked-out entries zeroed.
    pub fn param(&mut self, value: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        let mut stored = value.clone();
        if let Some(m) = mask {
            if m.len() != value.len() {
                return Err(Error::shape(
                    "Tape::param",
                    format!("mask has {} entries for {} values", m.len(), value.len()),
                ));
            }
            for (w, &keep) in stored.data_mut().iter_mut().zip(m) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
        if !stored.all_finite() {
            return Err(Error::NonFinite("parameter".into()));
        }
        let var = self.push(
            Op::Param {
                mask: mask.map(|m| m.to_vec()),
            },
            stored,
        );
        self.params.push(var);
        Ok(var)
    }

    /// `y = x w^T + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "affine",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (batch, inputs, outputs) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [outputs] {
                return Err(Error::shape(
                    "affine",
                    format!("bias {:?} for {outputs} outputs", self.value(b).shape()),
                ));
            }
        }
        let mut y = vec![0.0; batch * outputs];
        gemm(
            false,
            true,
            batch,
            outputs,
            inputs,
            1.0,
            self.value(x).data(),
            self.value(w).data(),
            0.0,
            &mut y,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(outputs) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(vec![batch, outputs], y)?;
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    /// Stride-1 2D convolution, `x: [batch, c, h, w]`, `w: [out, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} incompatible with kernel {ws:?}"),
            ));
        }
        let k = ws[2];
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::shape("conv2d", "same padding needs an odd kernel"));
                }
                (k - 1) / 2
            }
        };
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {xs:?}"),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            k,
            pad,
            out_h: xs[2] + 2 * pad - k + 1,
            out_w: xs[3] + 2 * pad - k + 1,
        };
        if let Some(b) = b {
            if self.value(b).shape() != [geom.out_c] {
                return Err(Error::shape("conv2d", "bias length differs from output channels"));
            }
        }
        let cols = geom.im2col(self.value(x).data());
        let mut y = vec![0.0; geom.batch * geom.out_image()];
        let wdata = self.value(w).data();
        for bi in 0..geom.batch {
            let col = &cols[bi * geom.col_image()..(bi + 1) * geom.col_image()];
            let out = &mut y[bi * geom.out_image()..(bi + 1) * geom.out_image()];
            gemm(
                false,
                false,
                geom.out_c,
                geom.positions(),
                geom.patch(),
                1.0,
                wdata,
                col,
                0.0,
                out,
            );
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (o, chunk) in out.chunks_mut(geom.positions()).enumerate() {
                    for v in chunk {
                        *v += bias[o];
                    }
                }
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], y)?;
        Ok(self.push(Op::Conv2d { x, w, b, geom, cols }, value))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape("max_pool2", format!("input {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let data = self.value(x).data();
        let mut y = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + (2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    y.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], y)?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, value))
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are
    /// dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape("avg_pool2", format!("input {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut corners = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    corners.push(plane * h * w + 2 * i * w + 2 * j);
                }
            }
        }
        let y = pool_mean(self.value(x).data(), &corners, w);
        let value = Tensor::new(vec![b, c, oh, ow], y)?;
        Ok(self.push(Op::AvgPool2 { x, corners, width: w }, value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu { x }, value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.tanh()).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(Op::Tanh { x }, value)
    }

    /// Collapses all trailing dimensions: `[batch, ...] -> [batch, rest]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let batch = src.rows();
        let rest = src.len() / batch.max(1);
        let value = src.clone().reshape(vec![batch, rest]).expect("same size");
        self.push(Op::Reshape { x }, value)
    }

    /// Mean softmax cross-entropy over the batch, computed with the
    /// max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {ls:?} for {} labels", labels.len()),
            ));
        }
        let (batch, classes) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &z[bi * classes..(bi + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for (p, v) in probs[bi * classes..(bi + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = loss / batch.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax cross-entropy".into()));
        }
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// `0.5 * x^T A x` over the flattened `x`; `A = I` when `matrix` is `None`.
    /// `A` must be symmetric.
    pub fn half_quadratic(&mut self, x: Var, matrix: Option<&Tensor>) -> Result<Var> {
        let n = self.value(x).len();
        let value = match matrix {
            None => 0.5 * dot(self.value(x).data(), self.value(x).data()),
            Some(a) => {
                if a.shape() != [n, n] {
                    return Err(Error::shape(
                        "half_quadratic",
                        format!("matrix {:?} for vector of length {n}", a.shape()),
                    ));
                }
                let ax = matvec(a.data(), self.value(x).data());
                0.5 * dot(self.value(x).data(), &ax)
            }
        };
        Ok(self.push(
            Op::HalfQuadratic {
                x,
                matrix: matrix.map(|a| a.data().to_vec()),
            },
            Tensor::scalar(value),
        ))
    }

    /// Reverse sweep from the scalar output. Consumes the tape: a second
    /// call is an error.
    pub fn backward(&mut self) -> Result<ParamGrads> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let grads = self.adjoints()?;
        self.consumed = true;
        Ok(grads)
    }

    fn seed(&self) -> Result<Vec<Option<Tensor>>> {
        self.output()?;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[self.nodes.len() - 1] = Some(Tensor::scalar(1.0));
        Ok(adj)
    }

    fn collect(&self, adj: &mut [Option<Tensor>]) -> ParamGrads {
        let mut dense = Vec::with_capacity(self.params.len());
        let mut masked = Vec::with_capacity(self.params.len());
        for &p in &self.params {
            let g = adj[p.0].take().unwrap_or_else(|| self.nodes[p.0].value.zeros_like());
            let mut m = g.clone();
            if let Op::Param { mask: Some(mask), .. } = &self.nodes[p.0].op {
                for (v, &keep) in m.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
            dense.push(g);
            masked.push(m);
        }
        ParamGrads { dense, masked }
    }

    fn adjoints(&self) -> Result<ParamGrads> {
        let mut adj = self.seed()?;
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.vjp(idx, &g, &mut adj);
            // Leaves keep their adjoint for collection.
            if matches!(self.nodes[idx].op, Op::Param { .. } | Op::Input) {
                adj[idx] = Some(g);
            }
        }
        Ok(self.collect(&mut adj))
    }

    /// First-order pullback of node `idx` given its adjoint `g`.
    fn vjp(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Input | Op::Param { .. } => {}
            Op::Affine { x, w, b } => {
                let (batch, inputs) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let outputs = nodes[w.0].value.shape()[0];
                let wv = nodes[w.0].value.data();
                let xv = nodes[x.0].value.data();
                gemm(false, false, batch, inputs, outputs, 1.0, g.data(), wv, 1.0, acc(adj, nodes, *x).data_mut());
                gemm(true, false, outputs, inputs, batch, 1.0, g.data(), xv, 1.0, acc(adj, nodes, *w).data_mut());
                if let Some(b) = b {
                    let gb = acc(adj, nodes, *b).data_mut();
                    for row in g.data().chunks(outputs) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let wv = nodes[w.0].value.data();
                let mut dcol = vec![0.0; geom.col_image()];
                for bi in 0..geom.batch {
                    let gy = &g.data()[bi * geom.out_image()..(bi + 1) * geom.out_image()];
                    let col = &cols[bi * geom.col_image()..(bi + 1) * geom.col_image()];
                    gemm(false, true, geom.out_c, geom.patch(), geom.positions(), 1.0, gy, col, 1.0, acc(adj, nodes, *w).data_mut());
                    gemm(true, false, geom.patch(), geom.positions(), geom.out_c, 1.0, wv, gy, 0.0, &mut dcol);
                    let gx = acc(adj, nodes, *x).data_mut();
                    geom.col2im_add(&dcol, &mut gx[bi * geom.in_image()..(bi + 1) * geom.in_image()]);
                    if let Some(b) = b {
                        let gb = acc(adj, nodes, *b).data_mut();
                        for (o, chunk) in gy.chunks(geom.positions()).enumerate() {
                            gb[o] += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let gx = acc(adj, nodes, *x).data_mut();
                for (&src, &v) in argmax.iter().zip(g.data()) {
                    gx[src] += v;
                }
            }
            Op::AvgPool2 { x, corners, width } => {
                let gx = acc(adj, nodes, *x).data_mut();
                for (&c, &v) in corners.iter().zip(g.data()) {
                    for off in [0, 1, *width, *width + 1] {
                        gx[c + off] += 0.25 * v;
                    }
                }
            }
            Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                let gx = acc(adj, nodes, *x).data_mut();
                for ((s, &v), &z) in gx.iter_mut().zip(g.data()).zip(xv) {
                    if z > 0.0 {
                        *s += v;
                    }
                }
            }
            Op::Tanh { x } => {
                let y = nodes[idx].value.data();
                let gx = acc(adj, nodes, *x).data_mut();
                for ((s, &v), &t) in gx.iter_mut().zip(g.data()).zip(y) {
                    *s += v * (1.0 - t * t);
                }
            }
            Op::Reshape { x } => {
                acc(adj, nodes, *x).add_assign(g.data());
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let seed = g.data()[0];
                let classes = probs.len() / labels.len().max(1);
                let scale = seed / labels.len().max(1) as f64;
                let gz = acc(adj, nodes, *logits).data_mut();
                for (bi, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let i = bi * classes + c;
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        gz[i] += scale * (probs[i] - onehot);
                    }
                }
            }
            Op::HalfQuadratic { x, matrix } => {
                let seed = g.data()[0];
                let xv = nodes[x.0].value.data();
                let gx = acc(adj, nodes, *x).data_mut();
                match matrix {
                    None => {
                        for (s, v) in gx.iter_mut().zip(xv) {
                            *s += seed * v;
                        }
                    }
                    Some(a) => {
                        for (s, v) in gx.iter_mut().zip(matvec(a, xv)) {
                            *s += seed * v;
                        }
                    }
                }
            }
        }
    }

    /// Exact Hessian-vector product of the scalar output with respect to the
    /// parameters, for the direction given per parameter in registration
    /// order. Directions are masked like the parameters themselves. Returns
    /// the masked gradient and the masked product. Does not consume the tape.
    pub fn hvp(&self, direction: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        if direction.len() != self.params.len() {
            return Err(Error::Dimension {
                expected: self.params.len(),
                got: direction.len(),
            });
        }
        let nodes = &self.nodes;
        // Tangent sweep.
        let mut tan: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut tan_cols: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        for (&p, d) in self.params.iter().zip(direction) {
            if d.len() != nodes[p.0].value.len() {
                return Err(Error::Dimension {
                    expected: nodes[p.0].value.len(),
                    got: d.len(),
                });
            }
            let mut t = d.clone().reshape(nodes[p.0].value.shape().to_vec())?;
            if let Op::Param { mask: Some(mask), .. } = &nodes[p.0].op {
                for (v, &keep) in t.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
            tan[p.0] = Some(t);
        }
        for idx in 0..nodes.len() {
            let (t, c) = self.jvp(idx, &tan);
            tan[idx] = t.or(tan[idx].take());
            tan_cols[idx] = c;
        }

        // Second-order reverse sweep: `adj` carries dL/dv, `radj` its
        // directional derivative.
        let mut adj = self.seed()?;
        let mut radj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for idx in (0..nodes.len()).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let rg = radj[idx].take();
            self.vjp(idx, &g, &mut adj);
            if let Some(rg) = &rg {
                self.vjp(idx, rg, &mut radj);
            }
            self.second_order(idx, &g, &tan, &tan_cols, &mut radj);
            if matches!(nodes[idx].op, Op::Param { .. } | Op::Input) {
                adj[idx] = Some(g);
                radj[idx] = rg;
            }
        }
        let grads = self.collect(&mut adj).masked;
        let hv = self.collect(&mut radj).masked;
        Ok((grads, hv))
    }

    /// Tangent of node `idx` from the tangents of its operands. Also returns
    /// the unfolded tangent input for convolutions.
    fn jvp(&self, idx: usize, tan: &[Option<Tensor>]) -> (Option<Tensor>, Option<Vec<f64>>) {
        let nodes = &self.nodes;
        let out_shape = || nodes[idx].value.shape().to_vec();
        match &nodes[idx].op {
            Op::Input | Op::Param { .. } => (None, None),
            Op::Affine { x, w, b } => {
                let (tx, tw) = (&tan[x.0], &tan[w.0]);
                let tb = b.and_then(|b| tan[b.0].as_ref());
                if tx.is_none() && tw.is_none() && tb.is_none() {
                    return (None, None);
                }
                let (batch, inputs) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let outputs = nodes[w.0].value.shape()[0];
                let mut y = vec![0.0; batch * outputs];
                if let Some(tx) = tx {
                    gemm(false, true, batch, outputs, inputs, 1.0, tx.data(), nodes[w.0].value.data(), 1.0, &mut y);
                }
                if let Some(tw) = tw {
                    gemm(false, true, batch, outputs, inputs, 1.0, nodes[x.0].value.data(), tw.data(), 1.0, &mut y);
                }
                if let Some(tb) = tb {
                    for row in y.chunks_mut(outputs) {
                        for (v, bv) in row.iter_mut().zip(tb.data()) {
                            *v += bv;
                        }
                    }
                }
                (Some(Tensor::new(out_shape(), y).expect("shape")), None)
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (tx, tw) = (&tan[x.0], &tan[w.0]);
                let tb = b.and_then(|b| tan[b.0].as_ref());
                if tx.is_none() && tw.is_none() && tb.is_none() {
                    return (None, None);
                }
                let tcols = tx.as_ref().map(|t| geom.im2col(t.data()));
                let mut y = vec![0.0; geom.batch * geom.out_image()];
                for bi in 0..geom.batch {
                    let out = &mut y[bi * geom.out_image()..(bi + 1) * geom.out_image()];
                    let span = bi * geom.col_image()..(bi + 1) * geom.col_image();
                    if let Some(tc) = &tcols {
                        gemm(false, false, geom.out_c, geom.positions(), geom.patch(), 1.0, nodes[w.0].value.data(), &tc[span.clone()], 1.0, out);
                    }
                    if let Some(tw) = tw {
                        gemm(false, false, geom.out_c, geom.positions(), geom.patch(), 1.0, tw.data(), &cols[span], 1.0, out);
                    }
                    if let Some(tb) = tb {
                        for (o, chunk) in out.chunks_mut(geom.positions()).enumerate() {
                            for v in chunk {
                                *v += tb.data()[o];
                            }
                        }
                    }
                }
                (Some(Tensor::new(out_shape(), y).expect("shape")), tcols)
            }
            Op::MaxPool2 { x, argmax } => (
                tan[x.0].as_ref().map(|t| {
                    let data = argmax.iter().map(|&i| t.data()[i]).collect();
                    Tensor::new(out_shape(), data).expect("shape")
                }),
                None,
            ),
            Op::AvgPool2 { x, corners, width } => (
                tan[x.0]
                    .as_ref()
                    .map(|t| Tensor::new(out_shape(), pool_mean(t.data(), corners, *width)).expect("shape")),
                None,
            ),
            Op::Relu { x } => (
                tan[x.0].as_ref().map(|t| {
                    let z = nodes[x.0].value.data();
                    let data = t.data().iter().zip(z).map(|(&v, &z)| if z > 0.0 { v } else { 0.0 }).collect();
                    Tensor::new(out_shape(), data).expect("shape")
                }),
                None,
            ),
            Op::Tanh { x } => (
                tan[x.0].as_ref().map(|t| {
                    let y = nodes[idx].value.data();
                    let data = t.data().iter().zip(y).map(|(&v, &y)| v * (1.0 - y * y)).collect();
                    Tensor::new(out_shape(), data).expect("shape")
                }),
                None,
            ),
            Op::Reshape { x } => (
                tan[x.0]
                    .as_ref()
                    .map(|t| t.clone().reshape(out_shape()).expect("shape")),
                None,
            ),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => (
                tan[logits.0].as_ref().map(|t| {
                    let classes = probs.len() / labels.len().max(1);
                    let mut s = 0.0;
                    for (bi, &label) in labels.iter().enumerate() {
                        let row = bi * classes..(bi + 1) * classes;
                        s += dot(&probs[row.clone()], &t.data()[row]) - t.data()[bi * classes + label];
                    }
                    Tensor::scalar(s / labels.len().max(1) as f64)
                }),
                None,
            ),
            Op::HalfQuadratic { x, matrix } => (
                tan[x.0].as_ref().map(|t| {
                    let xv = nodes[x.0].value.data();
                    let s = match matrix {
                        None => dot(xv, t.data()),
                        Some(a) => dot(&matvec(a, xv), t.data()),
                    };
                    Tensor::scalar(s)
                }),
                None,
            ),
        }
    }

    /// Terms of the directional derivative of the pullback that come from
    /// the operator itself changing along the tangent (the curvature part).
    fn second_order(
        &self,
        idx: usize,
        g: &Tensor,
        tan: &[Option<Tensor>],
        tan_cols: &[Option<Vec<f64>>],
        radj: &mut [Option<Tensor>],
    ) {
        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Affine { x, w, .. } => {
                let (batch, inputs) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let outputs = nodes[w.0].value.shape()[0];
                if let Some(tw) = &tan[w.0] {
                    gemm(false, false, batch, inputs, outputs, 1.0, g.data(), tw.data(), 1.0, acc(radj, nodes, *x).data_mut());
                }
                if let Some(tx) = &tan[x.0] {
                    gemm(true, false, outputs, inputs, batch, 1.0, g.data(), tx.data(), 1.0, acc(radj, nodes, *w).data_mut());
                }
            }
            Op::Conv2d { x, w, geom, .. } => {
                if let Some(tw) = &tan[w.0] {
                    let mut dcol = vec![0.0; geom.col_image()];
                    for bi in 0..geom.batch {
                        let gy = &g.data()[bi * geom.out_image()..(bi + 1) * geom.out_image()];
                        gemm(true, false, geom.patch(), geom.positions(), geom.out_c, 1.0, tw.data(), gy, 0.0, &mut dcol);
                        let rx = acc(radj, nodes, *x).data_mut();
                        geom.col2im_add(&dcol, &mut rx[bi * geom.in_image()..(bi + 1) * geom.in_image()]);
                    }
                }
                if let Some(tc) = &tan_cols[idx] {
                    for bi in 0..geom.batch {
                        let gy = &g.data()[bi * geom.out_image()..(bi + 1) * geom.out_image()];
                        let col = &tc[bi * geom.col_image()..(bi + 1) * geom.col_image()];
                        gemm(false, true, geom.out_c, geom.patch(), geom.positions(), 1.0, gy, col, 1.0, acc(radj, nodes, *w).data_mut());
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(t) = &tan[idx] {
                    let y = nodes[idx].value.data();
                    let rx = acc(radj, nodes, *x).data_mut();
                    for i in 0..y.len() {
                        rx[i] -= 2.0 * y[i] * t.data()[i] * g.data()[i];
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if let Some(t) = &tan[logits.0] {
                    let seed = g.data()[0];
                    let classes = probs.len() / labels.len().max(1);
                    let scale = seed / labels.len().max(1) as f64;
                    let rz = acc(radj, nodes, *logits).data_mut();
                    for bi in 0..labels.len() {
                        let row = bi * classes..(bi + 1) * classes;
                        let mean = dot(&probs[row.clone()], &t.data()[row.clone()]);
                        for i in row {
                            rz[i] += scale * probs[i] * (t.data()[i] - mean);
                        }
                    }
                }
            }
            Op::HalfQuadratic { x, matrix } => {
                if let Some(t) = &tan[x.0] {
                    let seed = g.data()[0];
                    let rx = acc(radj, nodes, *x).data_mut();
                    match matrix {
                        None => {
                            for (s, v) in rx.iter_mut().zip(t.data()) {
                                *s += seed * v;
                            }
                        }
                        Some(a) => {
                            for (s, v) in rx.iter_mut().zip(matvec(a, t.data())) {
                                *s += seed * v;
                            }
                        }
                    }
                }
            }
            // Piecewise-linear or linear operators have no curvature term.
            Op::Input
            | Op::Param { .. }
            | Op::MaxPool2 { .. }
            | Op::AvgPool2 { .. }
            | Op::Relu { .. }
            | Op::Reshape { .. } => {}
        }
    }
}

fn pool_mean(data: &[f64], corners: &[usize], width: usize) -> Vec<f64> {
    corners
        .iter()
        .map(|&c| 0.25 * (data[c] + data[c + 1] + data[c + width] + data[c + width + 1]))
        .collect()
}

fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    a.chunks(n).map(|row| dot(row, x)).collect()
}
