//! Weight initialization for masked networks and the signal-propagation
//! probe.
//!
//! Every scheme draws zero-mean Gaussian weights whose variance is
//! `gain / u`. The schemes differ only in `u`:
//!
//! * [`Family::MaskedDense`]: the dense fan of the layer, ignoring the mask;
//! * [`Family::LayerScaled`]: the mean active fan of the layer;
//! * [`Family::PerNeuron`]: the active fan of the individual neuron.
//!
//! [`Direction`] picks fan-in, fan-out or their mean. One standard normal
//! is drawn for every weight position (masked or not) in flat order, so at
//! density one all families produce bit-identical weights for a given
//! stream.

use std::fmt;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_network, MaskedNetwork, NetworkSpec, WeightedLayer};
use crate::rng::{derive, Rng, Stream};
use crate::sparsity::{allocate_sparsity, DistributionKind, SparsityDistribution};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    MaskedDense,
    LayerScaled,
    PerNeuron,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    Glorot,
    He,
}

impl Gain {
    pub fn value(self) -> f64 {
        match self {
            Gain::Glorot => 1.0,
            Gain::He => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InitScheme {
    pub family: Family,
    pub gain: Gain,
    pub direction: Direction,
}

impl InitScheme {
    pub const fn new(family: Family, gain: Gain, direction: Direction) -> Self {
        Self {
            family,
            gain,
            direction,
        }
    }

    /// He, forward, per-neuron: the default for sparse experiments.
    pub const fn per_neuron() -> Self {
        Self::new(Family::PerNeuron, Gain::He, Direction::Forward)
    }

    pub const fn masked_dense() -> Self {
        Self::new(Family::MaskedDense, Gain::He, Direction::Forward)
    }

    pub const fn layer_scaled() -> Self {
        Self::new(Family::LayerScaled, Gain::He, Direction::Forward)
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match self.family {
            Family::MaskedDense => "masked-dense",
            Family::LayerScaled => "layer-scaled",
            Family::PerNeuron => "per-neuron",
        };
        let gain = match self.gain {
            Gain::Glorot => "glorot",
            Gain::He => "he",
        };
        let dir = match self.direction {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::Average => "average",
        };
        write!(f, "{family}-{gain}-{dir}")
    }
}

impl std::str::FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown init scheme '{s}'"));
        let (family, rest) = if let Some(r) = s.strip_prefix("masked-dense") {
            (Family::MaskedDense, r)
        } else if let Some(r) = s.strip_prefix("layer-scaled") {
            (Family::LayerScaled, r)
        } else if let Some(r) = s.strip_prefix("per-neuron") {
            (Family::PerNeuron, r)
        } else {
            return Err(bad());
        };
        let mut scheme = InitScheme::new(family, Gain::He, Direction::Forward);
        for part in rest.split('-').filter(|p| !p.is_empty()) {
            match part {
                "he" => scheme.gain = Gain::He,
                "glorot" => scheme.gain = Gain::Glorot,
                "forward" => scheme.direction = Direction::Forward,
                "backward" => scheme.direction = Direction::Backward,
                "average" => scheme.direction = Direction::Average,
                _ => return Err(bad()),
            }
        }
        Ok(scheme)
    }
}

/// Neurons with no active connection in the scheme's direction, per
/// weighted layer. Their weights stay zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InitReport {
    pub zero_fan: Vec<usize>,
}

impl InitReport {
    pub fn total_zero_fan(&self) -> usize {
        self.zero_fan.iter().sum()
    }
}

/// Per-position variance parameter of `scheme` on `layer`; zero at masked
/// positions.
pub fn variance_params(layer: &WeightedLayer, scheme: InitScheme) -> Vec<f64> {
    let mask = layer.mask();
    let gain = scheme.gain.value();
    let fans = mask.fan_counts();
    let active = mask.active() as f64;
    let (n_in, n_out) = (layer.dense_fan_in() as f64, layer.dense_fan_out() as f64);
    let (mean_in, mean_out) = (active / mask.rows() as f64, active / mask.cols() as f64);
    (0..mask.len())
        .map(|p| {
            if !mask.get(p) {
                return 0.0;
            }
            let (fi, fo) = match scheme.family {
                Family::MaskedDense => (n_in, n_out),
                Family::LayerScaled => (mean_in, mean_out),
                Family::PerNeuron => (
                    fans.fan_in[mask.row_of(p)] as f64,
                    fans.fan_out[mask.col_of(p)] as f64,
                ),
            };
            let u = match scheme.direction {
                Direction::Forward => fi,
                Direction::Backward => fo,
                Direction::Average => (fi + fo) / 2.0,
            };
            gain / u
        })
        .collect()
}

/// Draws fresh weights for every weighted layer of `net` under its current
/// masks. Biases are reset to zero.
pub fn initialize(net: &mut MaskedNetwork, scheme: InitScheme, rng: &mut Rng) -> InitReport {
    let mut report = InitReport::default();
    for layer in net.weighted_mut() {
        let var = variance_params(layer, scheme);
        let fans = layer.mask().fan_counts();
        report.zero_fan.push(match scheme.direction {
            Direction::Forward => fans.fan_in.iter().filter(|&&f| f == 0).count(),
            Direction::Backward => fans.fan_out.iter().filter(|&&f| f == 0).count(),
            Direction::Average => fans
                .fan_in
                .iter()
                .chain(&fans.fan_out)
                .filter(|&&f| f == 0)
                .count(),
        });
        let w: Vec<f64> = var
            .iter()
            .map(|&v| {
                let eps: f64 = rng.sample(StandardNormal);
                if v > 0.0 {
                    eps * v.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        layer
            .set_weights(&w)
            .expect("variance vector matches layer size");
        let nb = layer.bias().map_or(0, Tensor::len);
        layer.set_bias(&vec![0.0; nb]).expect("bias length");
    }
    report
}

/// Output of one probe: the standard deviation of every weighted layer's
/// pre-activation (the last entry is the pre-softmax output).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub n_samples: usize,
    pub layer_std: Vec<f64>,
}

impl ProbeRecord {
    pub fn output_std(&self) -> f64 {
        *self.layer_std.last().expect("at least one layer")
    }
}

const PROBE_CHUNK: usize = 256;

/// Feeds `n_samples` standard-normal inputs through `net`. For each sample
/// the population standard deviation across the units of a layer is taken;
/// the reported value is its mean over samples.
pub fn signal_probe(net: &MaskedNetwork, n_samples: usize, rng: &mut Rng) -> Result<ProbeRecord> {
    if n_samples == 0 {
        return Err(Error::Config("signal probe needs at least one sample".into()));
    }
    let d = net.input_len();
    let mut sums = vec![0.0; net.weighted_count()];
    let mut done = 0;
    while done < n_samples {
        let n = PROBE_CHUNK.min(n_samples - done);
        let x: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let f = net.record(&Tensor::new(vec![n, d], x)?, None)?;
        for (s, &z) in sums.iter_mut().zip(&f.preactivations) {
            let t = f.tape.value(z);
            let per = t.len() / n;
            for row in t.data().chunks(per) {
                let mean = row.iter().sum::<f64>() / per as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
                *s += var.sqrt();
            }
        }
        done += n;
    }
    Ok(ProbeRecord {
        n_samples,
        layer_std: sums.into_iter().map(|s| s / n_samples as f64).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub sparsity: f64,
    pub scheme: String,
    pub seed: u64,
    pub layer_index: usize,
    pub std: f64,
    pub n_samples: usize,
}

/// Runs [`signal_probe`] over every (sparsity, scheme, seed) cell, with
/// layer budgets of the given kind. Within a seed, all schemes share the
/// mask and the probe inputs.
pub fn sweep_sparsity_probe(
    spec: &NetworkSpec,
    kind: &DistributionKind,
    sparsities: &[f64],
    schemes: &[InitScheme],
    seeds: &[u64],
    n_samples: usize,
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for &s in sparsities {
        for &scheme in schemes {
            for &seed in seeds {
                let net = build_network(spec)?;
                let dist = SparsityDistribution {
                    kind: kind.clone(),
                    sparsity: s,
                    exclude: Vec::new(),
                };
                let mut net = allocate_sparsity(net, &dist, &mut derive(seed, Stream::Mask, 0))?;
                initialize(&mut net, scheme, &mut derive(seed, Stream::Init, 0));
                let rec = signal_probe(&net, n_samples, &mut derive(seed, Stream::Probe, 0))?;
                for (layer_index, &std) in rec.layer_std.iter().enumerate() {
                    rows.push(ProbeRow {
                        sparsity: s,
                        scheme: scheme.to_string(),
                        seed,
                        layer_index,
                        std,
                        n_samples,
                    });
                }
            }
        }
    }
    Ok(rows)
}
