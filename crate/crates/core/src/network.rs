//! Masked networks: layer specifications, binary masks and the canonical
//! flat parameter layout.
//!
//! Parameters are flattened layer by layer, weights (row-major) first and
//! then the bias. Biases are always dense and never masked. Every mutating
//! operation keeps `w == 0` wherever the mask is `0`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

fn yes() -> bool {
    true
}

/// One entry of a network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        outputs: usize,
        activation: Activation,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        activation: Activation,
        #[serde(default = "yes")]
        bias: bool,
    },
    MaxPool2,
    AvgPool2,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Shape of one example, without the batch dimension.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Fully connected ReLU network with the given layer widths
    /// (`widths[0]` is the input size, the last entry the class count).
    pub fn mlp(widths: &[usize], bias: bool) -> Self {
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate().skip(1) {
            let activation = if i + 1 == widths.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(LayerSpec::Dense {
                outputs: w,
                activation,
                bias,
            });
        }
        Self {
            input_shape: widths.first().map(|&w| vec![w]).unwrap_or_default(),
            layers,
        }
    }

    /// LeNet5-style convolutional network for 28x28 single-channel inputs,
    /// with ReLU activations and 2x2 average pooling (the original
    /// subsampling). Max pooling inflates the second moment at every pool,
    /// which breaks the variance bookkeeping of He-style initializations.
    pub fn lenet5() -> Self {
        Self::lenet5_with_pool(LayerSpec::AvgPool2)
    }

    /// [`NetworkSpec::lenet5`] with 2x2 max pooling instead.
    pub fn lenet5_max_pool() -> Self {
        Self::lenet5_with_pool(LayerSpec::MaxPool2)
    }

    fn lenet5_with_pool(pool: LayerSpec) -> Self {
        use LayerSpec::*;
        Self {
            input_shape: vec![1, 28, 28],
            layers: vec![
                Conv2d {
                    out_channels: 6,
                    kernel: 5,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                    bias: true,
                },
                pool.clone(),
                Conv2d {
                    out_channels: 16,
                    kernel: 5,
                    padding: Padding::Valid,
                    activation: Activation::Relu,
                    bias: true,
                },
                pool,
                Flatten,
                Dense {
                    outputs: 120,
                    activation: Activation::Relu,
                    bias: true,
                },
                Dense {
                    outputs: 84,
                    activation: Activation::Relu,
                    bias: true,
                },
                Dense {
                    outputs: 10,
                    activation: Activation::Identity,
                    bias: true,
                },
            ],
        }
    }
}

/// Binary connectivity pattern with the same shape as its weight tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

/// Per-neuron connection counts under a mask. For convolutions, counts are
/// per output/input channel and include every kernel element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FanCounts {
    pub fan_in: Vec<usize>,
    pub fan_out: Vec<usize>,
}

impl Mask {
    pub fn dense(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            bits: vec![true; n],
        }
    }

    pub fn from_bits(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != bits.len() || shape.len() < 2 {
            return Err(Error::shape(
                "Mask::from_bits",
                format!("{} bits for shape {shape:?}", bits.len()),
            ));
        }
        Ok(Self { shape, bits })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.bits[i] = value;
    }

    pub fn active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.active() as f64 / self.bits.len() as f64
    }

    /// Number of output neurons (rows).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of input neurons or channels.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Row index (output neuron) of flat position `p`.
    pub fn row_of(&self, p: usize) -> usize {
        p / (self.bits.len() / self.rows())
    }

    /// Column index (input neuron or channel) of flat position `p`.
    pub fn col_of(&self, p: usize) -> usize {
        let inner: usize = self.shape[2..].iter().product();
        (p / inner) % self.cols()
    }

    pub fn fan_counts(&self) -> FanCounts {
        let mut fan_in = vec![0; self.rows()];
        let mut fan_out = vec![0; self.cols()];
        for (p, &b) in self.bits.iter().enumerate() {
            if b {
                fan_in[self.row_of(p)] += 1;
                fan_out[self.col_of(p)] += 1;
            }
        }
        FanCounts { fan_in, fan_out }
    }
}

pub fn fan_counts(mask: &Mask) -> FanCounts {
    mask.fan_counts()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightedKind {
    Dense,
    Conv2d { padding: Padding },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLayer {
    pub kind: WeightedKind,
    pub activation: Activation,
    weights: Tensor,
    bias: Option<Tensor>,
    mask: Mask,
}

impl WeightedLayer {
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn param_len(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Dense fan-in of one output neuron (input size or `c_in * k * k`).
    pub fn dense_fan_in(&self) -> usize {
        self.weights.len() / self.weights.shape()[0]
    }

    /// Dense fan-out of one input neuron (output size or `c_out * k * k`).
    pub fn dense_fan_out(&self) -> usize {
        self.weights.len() / self.weights.shape()[1]
    }

    /// Replaces the mask and zeroes newly masked weights.
    pub fn set_mask(&mut self, mask: Mask) -> Result<()> {
        if mask.shape() != self.weights.shape() {
            return Err(Error::shape(
                "set_mask",
                format!("mask {:?} for weights {:?}", mask.shape(), self.weights.shape()),
            ));
        }
        self.mask = mask;
        self.apply_mask();
        Ok(())
    }

    pub fn set_mask_bit(&mut self, p: usize, value: bool) {
        self.mask.set(p, value);
        if !value {
            self.weights.data_mut()[p] = 0.0;
        }
    }

    pub fn set_weight(&mut self, p: usize, value: f64) {
        self.weights.data_mut()[p] = if self.mask.get(p) { value } else { 0.0 };
    }

    /// Overwrites all weights; masked positions are forced to zero.
    pub fn set_weights(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.weights.len() {
            return Err(Error::Dimension {
                expected: self.weights.len(),
                got: values.len(),
            });
        }
        self.weights.data_mut().copy_from_slice(values);
        self.apply_mask();
        Ok(())
    }

    pub fn set_bias(&mut self, values: &[f64]) -> Result<()> {
        match &mut self.bias {
            Some(b) if b.len() == values.len() => {
                b.data_mut().copy_from_slice(values);
                Ok(())
            }
            Some(b) => Err(Error::Dimension {
                expected: b.len(),
                got: values.len(),
            }),
            None if values.is_empty() => Ok(()),
            None => Err(Error::Dimension {
                expected: 0,
                got: values.len(),
            }),
        }
    }

    fn apply_mask(&mut self) {
        for (w, &keep) in self.weights.data_mut().iter_mut().zip(self.mask.bits()) {
            if !keep {
                *w = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Weighted(WeightedLayer),
    MaxPool2,
    AvgPool2,
    Flatten,
}

/// A feed-forward network whose weighted layers carry binary masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNetwork {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    classes: usize,
    /// Training step at which this state was captured.
    pub step: u64,
}

/// Output of a network forward pass recorded on a tape.
pub struct Forward {
    pub tape: Tape,
    /// Pre-activation output of each weighted layer; the last entry holds
    /// the logits.
    pub preactivations: Vec<Var>,
    pub logits: Var,
}

pub fn build_network(spec: &NetworkSpec) -> Result<MaskedNetwork> {
    MaskedNetwork::new(spec)
}

impl MaskedNetwork {
    /// Builds a network with all-zero parameters and dense masks.
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::EmptySpec);
        }
        if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
            return Err(Error::shape("input", format!("{:?}", spec.input_shape)));
        }
        let mut shape = spec.input_shape.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let ctx = || format!("layer {i} ({l:?})");
            match *l {
                LayerSpec::Dense {
                    outputs,
                    activation,
                    bias,
                } => {
                    if shape.len() != 1 || outputs == 0 {
                        return Err(Error::shape(ctx(), format!("dense layer on input {shape:?}")));
                    }
                    let wshape = vec![outputs, shape[0]];
                    layers.push(Layer::Weighted(WeightedLayer {
                        kind: WeightedKind::Dense,
                        activation,
                        weights: Tensor::zeros(wshape.clone()),
                        bias: bias.then(|| Tensor::zeros(vec![outputs])),
                        mask: Mask::dense(wshape),
                    }));
                    shape = vec![outputs];
                }
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    padding,
                    activation,
                    bias,
                } => {
                    if shape.len() != 3 || out_channels == 0 || kernel == 0 {
                        return Err(Error::shape(ctx(), format!("conv layer on input {shape:?}")));
                    }
                    let pad = match padding {
                        Padding::Valid => 0,
                        Padding::Same if kernel % 2 == 1 => (kernel - 1) / 2,
                        Padding::Same => {
                            return Err(Error::shape(ctx(), "same padding needs an odd kernel"))
                        }
                    };
                    if shape[1] + 2 * pad < kernel || shape[2] + 2 * pad < kernel {
                        return Err(Error::shape(ctx(), format!("kernel too large for {shape:?}")));
                    }
                    let wshape = vec![out_channels, shape[0], kernel, kernel];
                    layers.push(Layer::Weighted(WeightedLayer {
                        kind: WeightedKind::Conv2d { padding },
                        activation,
                        weights: Tensor::zeros(wshape.clone()),
                        bias: bias.then(|| Tensor::zeros(vec![out_channels])),
                        mask: Mask::dense(wshape),
                    }));
                    shape = vec![
                        out_channels,
                        shape[1] + 2 * pad - kernel + 1,
                        shape[2] + 2 * pad - kernel + 1,
                    ];
                }
                LayerSpec::MaxPool2 | LayerSpec::AvgPool2 => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::shape(ctx(), format!("pooling on input {shape:?}")));
                    }
                    layers.push(if matches!(l, LayerSpec::MaxPool2) {
                        Layer::MaxPool2
                    } else {
                        Layer::AvgPool2
                    });
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerSpec::Flatten => {
                    layers.push(Layer::Flatten);
                    shape = vec![shape.iter().product()];
                }
            }
        }
        if shape.len() != 1 || shape[0] < 2 {
            return Err(Error::shape(
                "output",
                format!("network must end in a flat class vector, got {shape:?}"),
            ));
        }
        if !matches!(layers.last(), Some(Layer::Weighted(_))) {
            return Err(Error::shape("output", "last layer must be weighted"));
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            classes: shape[0],
            step: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn weighted(&self) -> impl Iterator<Item = &WeightedLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Weighted(w) => Some(w),
            _ => None,
        })
    }

    pub fn weighted_mut(&mut self) -> impl Iterator<Item = &mut WeightedLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Weighted(w) => Some(w),
            _ => None,
        })
    }

    pub fn weighted_count(&self) -> usize {
        self.weighted().count()
    }

    pub fn layer(&self, i: usize) -> &WeightedLayer {
        self.weighted().nth(i).expect("weighted layer index out of range")
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut WeightedLayer {
        self.weighted_mut().nth(i).expect("weighted layer index out of range")
    }

    /// Number of weights, biases excluded.
    pub fn weight_count(&self) -> usize {
        self.weighted().map(WeightedLayer::len).sum()
    }

    /// Number of trainable parameters including biases.
    pub fn param_count(&self) -> usize {
        self.weighted().map(WeightedLayer::param_len).sum()
    }

    pub fn active_weights(&self) -> usize {
        self.weighted().map(|l| l.mask.active()).sum()
    }

    /// Fraction of masked-out weights over all weight tensors.
    pub fn global_sparsity(&self) -> f64 {
        1.0 - self.active_weights() as f64 / self.weight_count() as f64
    }

    pub fn layer_densities(&self) -> Vec<f64> {
        self.weighted().map(|l| l.mask.density()).collect()
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.weighted().map(|l| l.mask.clone()).collect()
    }

    pub fn set_masks(&mut self, masks: &[Mask]) -> Result<()> {
        if masks.len() != self.weighted_count() {
            return Err(Error::Architecture(format!(
                "{} masks for {} weighted layers",
                masks.len(),
                self.weighted_count()
            )));
        }
        for (layer, m) in self.weighted_mut().zip(masks) {
            layer.set_mask(m.clone())?;
        }
        Ok(())
    }

    /// Flat parameter vector in canonical order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.weighted() {
            out.extend_from_slice(l.weights.data());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b.data());
            }
        }
        out
    }

    /// Overwrites all parameters from a flat vector; masked weights stay zero.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                got: values.len(),
            });
        }
        let mut off = 0;
        for l in self.weighted_mut() {
            let n = l.weights.len();
            l.set_weights(&values[off..off + n])?;
            off += n;
            if let Some(b) = &mut l.bias {
                let nb = b.len();
                b.data_mut().copy_from_slice(&values[off..off + nb]);
                off += nb;
            }
        }
        Ok(())
    }

    /// Per-parameter activity flags in canonical order (biases are active).
    pub fn param_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.weighted() {
            out.extend_from_slice(l.mask.bits());
            if let Some(b) = &l.bias {
                out.extend(std::iter::repeat(true).take(b.len()));
            }
        }
        out
    }

    /// Flat indices of active parameters in canonical order.
    pub fn active_indices(&self) -> Vec<usize> {
        self.param_mask()
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    /// Offset of each weighted layer's weights in the flat vector.
    pub fn weight_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.weighted()
            .map(|l| {
                let o = off;
                off += l.param_len();
                o
            })
            .collect()
    }

    /// True when both networks have identical layer structure.
    pub fn same_architecture(&self, other: &MaskedNetwork) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (Layer::Weighted(x), Layer::Weighted(y)) => {
                    x.kind == y.kind
                        && x.activation == y.activation
                        && x.weights.shape() == y.weights.shape()
                        && x.bias.as_ref().map(Tensor::len) == y.bias.as_ref().map(Tensor::len)
                }
                (Layer::MaxPool2, Layer::MaxPool2)
                | (Layer::AvgPool2, Layer::AvgPool2)
                | (Layer::Flatten, Layer::Flatten) => true,
                _ => false,
            })
    }

    /// Reshapes a batch given as `[batch, features]` or `[batch, input...]`
    /// to the layout the first layer expects.
    fn shape_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.rows();
        if batch.shape().is_empty() || batch.len() != n * self.input_len() {
            return Err(Error::shape(
                "input",
                format!("batch {:?} for example shape {:?}", batch.shape(), self.spec.input_shape),
            ));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.spec.input_shape);
        batch.clone().reshape(shape)
    }

    /// Records the network on a fresh tape; `labels` adds the mean
    /// softmax cross-entropy head.
    pub fn record(&self, batch: &Tensor, labels: Option<&[usize]>) -> Result<Forward> {
        let x = self.shape_batch(batch)?;
        if let Some(labels) = labels {
            if labels.len() != x.rows() {
                return Err(Error::shape(
                    "labels",
                    format!("{} labels for batch of {}", labels.len(), x.rows()),
                ));
            }
        }
        let mut tape = Tape::new();
        let mut h = tape.input(x)?;
        let mut pre = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let wrap = |e: Error| match e {
                Error::Shape { detail, .. } => Error::shape(format!("layer {i}"), detail),
                other => other,
            };
            h = match layer {
                Layer::Weighted(l) => {
                    let w = tape.param(&l.weights, Some(l.mask.bits()))?;
                    let b = match &l.bias {
                        Some(b) => Some(tape.param(b, None)?),
                        None => None,
                    };
                    let z = match l.kind {
                        WeightedKind::Dense => tape.affine(h, w, b).map_err(wrap)?,
                        WeightedKind::Conv2d { padding } => {
                            tape.conv2d(h, w, b, padding).map_err(wrap)?
                        }
                    };
                    pre.push(z);
                    match l.activation {
                        Activation::Identity => z,
                        Activation::Relu => tape.relu(z),
                        Activation::Tanh => tape.tanh(z),
                    }
                }
                Layer::MaxPool2 => tape.max_pool2(h).map_err(wrap)?,
                Layer::AvgPool2 => tape.avg_pool2(h).map_err(wrap)?,
                Layer::Flatten => tape.flatten(h),
            };
        }
        let logits = h;
        if let Some(labels) = labels {
            tape.softmax_cross_entropy(logits, labels)?;
        }
        Ok(Forward {
            tape,
            preactivations: pre,
            logits,
        })
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let f = self.record(batch, None)?;
        Ok(f.tape.value(f.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_counts_of_small_mask() {
        let m = Mask::from_bits(
            vec![3, 3],
            [1, 0, 1, 0, 0, 0, 1, 1, 1].iter().map(|&b| b == 1).collect(),
        )
        .unwrap();
        let f = m.fan_counts();
        assert_eq!(f.fan_in, vec![2, 0, 3]);
        assert_eq!(f.fan_out, vec![2, 1, 2]);
    }

    #[test]
    fn dense_mask_fans_reduce_to_dimensions() {
        let f = Mask::dense(vec![4, 7]).fan_counts();
        assert!(f.fan_in.iter().all(|&v| v == 7));
        assert!(f.fan_out.iter().all(|&v| v == 4));
        let f = Mask::dense(vec![6, 3, 5, 5]).fan_counts();
        assert!(f.fan_in.iter().all(|&v| v == 75));
        assert!(f.fan_out.iter().all(|&v| v == 150));
    }

    #[test]
    fn mlp_parameter_count() {
        let net = build_network(&NetworkSpec::mlp(&[784, 300, 100, 10], false)).unwrap();
        assert_eq!(net.weight_count(), 784 * 300 + 300 * 100 + 100 * 10);
        assert_eq!(net.param_count(), 266_200);
        assert_eq!(net.weighted_count(), 3);
        let with_bias = build_network(&NetworkSpec::mlp(&[784, 300, 100, 10], true)).unwrap();
        assert_eq!(with_bias.param_count(), 266_610);
        assert_eq!(with_bias.weight_count(), 266_200);
    }

    #[test]
    fn lenet5_has_five_weighted_layers() {
        let net = build_network(&NetworkSpec::lenet5()).unwrap();
        assert_eq!(net.weighted_count(), 5);
        let sizes: Vec<usize> = net.weighted().map(|l| l.len()).collect();
        assert_eq!(sizes, vec![150, 2400, 48000, 10080, 840]);
        assert!(net.layer_densities().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn empty_and_broken_specs_fail() {
        let empty = NetworkSpec {
            input_shape: vec![4],
            layers: vec![],
        };
        assert!(matches!(build_network(&empty), Err(Error::EmptySpec)));
        let broken = NetworkSpec {
            input_shape: vec![1, 28, 28],
            layers: vec![LayerSpec::Dense {
                outputs: 10,
                activation: Activation::Identity,
                bias: true,
            }],
        };
        assert!(build_network(&broken).is_err());
    }

    #[test]
    fn masked_weights_are_zero_after_set() {
        let mut net = build_network(&NetworkSpec::mlp(&[3, 2], true)).unwrap();
        let mask = Mask::from_bits(vec![2, 3], vec![true, false, true, false, true, true]).unwrap();
        net.layer_mut(0).set_mask(mask).unwrap();
        net.set_params(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(net.params(), vec![1.0, 0.0, 3.0, 0.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(net.active_indices(), vec![0, 2, 4, 5, 6, 7]);
    }

    #[test]
    fn shape_error_names_layer() {
        let net = build_network(&NetworkSpec::mlp(&[3, 2], true)).unwrap();
        let bad = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(net.record(&bad, Some(&[0, 1])).is_err());
        let ok = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(net.record(&ok, Some(&[0])).is_err());
    }
}
