//! Layer-wise sparsity budgets and random mask allocation.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Mask, MaskedNetwork, WeightedKind, WeightedLayer};
use crate::rng::Rng;

/// Realized global sparsity must land this close to the target.
pub const SPARSITY_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DistributionKind {
    /// Every sparsified layer gets the same density.
    Uniform,
    /// Erdos-Renyi-Kernel: density proportional to
    /// `(n_in + n_out) / (n_in * n_out)` for dense layers and
    /// `(c_in + c_out + k_h + k_w) / (c_in * c_out * k_h * k_w)` for
    /// convolutions.
    Erk,
    /// Densities given per weighted layer.
    Explicit { densities: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityDistribution {
    #[serde(flatten)]
    pub kind: DistributionKind,
    /// Target fraction of zero weights over all weight tensors.
    pub sparsity: f64,
    /// Weighted-layer indices kept dense.
    #[serde(default)]
    pub exclude: Vec<usize>,
}

impl SparsityDistribution {
    pub fn uniform(sparsity: f64) -> Self {
        Self {
            kind: DistributionKind::Uniform,
            sparsity,
            exclude: Vec::new(),
        }
    }

    pub fn erk(sparsity: f64) -> Self {
        Self {
            kind: DistributionKind::Erk,
            sparsity,
            exclude: Vec::new(),
        }
    }
}

/// ERK scale factor of one layer.
pub fn erk_score(layer: &WeightedLayer) -> f64 {
    let s = layer.weights().shape();
    match layer.kind {
        WeightedKind::Dense => (s[0] + s[1]) as f64 / (s[0] * s[1]) as f64,
        WeightedKind::Conv2d { .. } => {
            (s[0] + s[1] + s[2] + s[3]) as f64 / (s[0] * s[1] * s[2] * s[3]) as f64
        }
    }
}

/// Per-layer densities realizing `dist` on `net`. Layers whose scaled
/// density would exceed one are made dense and the remaining budget is
/// redistributed over the others.
pub fn layer_densities(net: &MaskedNetwork, dist: &SparsityDistribution) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&dist.sparsity) {
        return Err(Error::Config(format!(
            "sparsity must lie in [0, 1), got {}",
            dist.sparsity
        )));
    }
    let layers: Vec<&WeightedLayer> = net.weighted().collect();
    if let Some(&bad) = dist.exclude.iter().find(|&&i| i >= layers.len()) {
        return Err(Error::Config(format!("excluded layer {bad} does not exist")));
    }
    let sizes: Vec<f64> = layers.iter().map(|l| l.len() as f64).collect();
    let total: f64 = sizes.iter().sum();
    let budget = (1.0 - dist.sparsity) * total;

    if let DistributionKind::Explicit { densities } = &dist.kind {
        if densities.len() != layers.len() {
            return Err(Error::Config(format!(
                "{} explicit densities for {} layers",
                densities.len(),
                layers.len()
            )));
        }
        if densities.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::Config("explicit densities must lie in [0, 1]".into()));
        }
        return Ok(densities.clone());
    }

    let raw: Vec<f64> = match dist.kind {
        DistributionKind::Uniform => vec![1.0; layers.len()],
        DistributionKind::Erk => layers.iter().map(|l| erk_score(l)).collect(),
        DistributionKind::Explicit { .. } => unreachable!(),
    };
    let mut dense: Vec<bool> = (0..layers.len()).map(|i| dist.exclude.contains(&i)).collect();
    loop {
        let fixed: f64 = (0..layers.len()).filter(|&i| dense[i]).map(|i| sizes[i]).sum();
        let divisor: f64 = (0..layers.len())
            .filter(|&i| !dense[i])
            .map(|i| raw[i] * sizes[i])
            .sum();
        let rhs = budget - fixed;
        if rhs < 0.0 {
            return Err(Error::Infeasible(format!(
                "dense layers hold {fixed} weights but the budget is {budget:.1}"
            )));
        }
        if divisor == 0.0 {
            return Ok(vec![1.0; layers.len()]);
        }
        let eps = rhs / divisor;
        let mut changed = false;
        for i in 0..layers.len() {
            if !dense[i] && eps * raw[i] > 1.0 {
                dense[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok((0..layers.len())
                .map(|i| if dense[i] { 1.0 } else { eps * raw[i] })
                .collect());
        }
    }
}

/// Samples fresh masks following `dist`: each layer receives
/// `round(density * size)` active positions drawn uniformly without
/// replacement. Masked weights are zeroed.
pub fn allocate_sparsity(
    mut net: MaskedNetwork,
    dist: &SparsityDistribution,
    rng: &mut Rng,
) -> Result<MaskedNetwork> {
    let densities = layer_densities(&net, dist)?;
    let mut masks = Vec::with_capacity(densities.len());
    for (layer, &d) in net.weighted().zip(&densities) {
        let n = layer.len();
        let k = ((d * n as f64).round() as usize).min(n);
        let mut bits = vec![false; n];
        if k == n {
            bits.iter_mut().for_each(|b| *b = true);
        } else {
            for i in sample(rng, n, k).into_iter() {
                bits[i] = true;
            }
        }
        masks.push(Mask::from_bits(layer.weights().shape().to_vec(), bits)?);
    }
    net.set_masks(&masks)?;
    let realized = net.global_sparsity();
    if (realized - dist.sparsity).abs() > SPARSITY_TOLERANCE {
        return Err(Error::Infeasible(format!(
            "realized sparsity {realized:.4} misses target {:.4}",
            dist.sparsity
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NetworkSpec};
    use crate::rng::seeded;

    #[test]
    fn uniform_single_layer_exact_count() {
        let net = build_network(&NetworkSpec::mlp(&[100, 10], false)).unwrap();
        let net = allocate_sparsity(net, &SparsityDistribution::uniform(0.95), &mut seeded(1)).unwrap();
        assert_eq!(net.layer(0).mask().active(), 50);
    }

    #[test]
    fn erk_equal_shapes_equal_densities() {
        let net = build_network(&NetworkSpec::mlp(&[50, 50, 50, 50], false)).unwrap();
        let d = layer_densities(&net, &SparsityDistribution::erk(0.9)).unwrap();
        assert_eq!(d[0], d[1]);
        assert_eq!(d[1], d[2]);
    }

    #[test]
    fn erk_clamps_small_layers() {
        let net = build_network(&NetworkSpec::mlp(&[784, 300, 100, 10], false)).unwrap();
        let d = layer_densities(&net, &SparsityDistribution::erk(0.5)).unwrap();
        assert_eq!(d[2], 1.0);
        assert!(d.iter().all(|&x| x <= 1.0));
        let net = allocate_sparsity(net, &SparsityDistribution::erk(0.5), &mut seeded(3)).unwrap();
        assert!((net.global_sparsity() - 0.5).abs() <= SPARSITY_TOLERANCE);
    }

    #[test]
    fn exclusions_that_exhaust_budget_fail() {
        let net = build_network(&NetworkSpec::mlp(&[100, 10, 2], false)).unwrap();
        let dist = SparsityDistribution {
            kind: DistributionKind::Uniform,
            sparsity: 0.95,
            exclude: vec![0],
        };
        assert!(matches!(layer_densities(&net, &dist), Err(Error::Infeasible(_))));
        assert!(layer_densities(&net, &SparsityDistribution::uniform(1.0)).is_err());
    }

    #[test]
    fn same_seed_same_mask() {
        let spec = NetworkSpec::mlp(&[30, 20, 5], true);
        let a = allocate_sparsity(build_network(&spec).unwrap(), &SparsityDistribution::uniform(0.8), &mut seeded(9)).unwrap();
        let b = allocate_sparsity(build_network(&spec).unwrap(), &SparsityDistribution::uniform(0.8), &mut seeded(9)).unwrap();
        assert_eq!(a.masks(), b.masks());
    }
}
