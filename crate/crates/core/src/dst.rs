//! Connectivity evolution: drop-and-grow mask updates (SET, RigL and its
//! inverted variant), gradual magnitude pruning and lottery-ticket
//! extraction.
//!
//! Ties between equal magnitudes or gradients always go to the lowest flat
//! index within the layer.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{initialize, InitReport, InitScheme};
use crate::network::{Mask, MaskedNetwork};
use crate::rng::Rng;
use crate::schedule::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DstMethod {
    None,
    Set,
    Rigl,
    RiglInverted,
}

impl DstMethod {
    pub fn name(self) -> &'static str {
        match self {
            DstMethod::None => "none",
            DstMethod::Set => "set",
            DstMethod::Rigl => "rigl",
            DstMethod::RiglInverted => "rigl-inverted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropSchedule {
    Cosine,
    LrCoupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstConfig {
    pub method: DstMethod,
    pub drop_fraction: f64,
    pub frequency: u64,
    pub end_step: u64,
    pub schedule: DropSchedule,
}

impl Default for DstConfig {
    fn default() -> Self {
        Self {
            method: DstMethod::None,
            drop_fraction: 0.3,
            frequency: 100,
            end_step: 0,
            schedule: DropSchedule::LrCoupled,
        }
    }
}

impl DstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == DstMethod::None {
            return Ok(());
        }
        if !(self.drop_fraction > 0.0 && self.drop_fraction < 1.0) {
            return Err(Error::Config(format!(
                "drop fraction must lie in (0, 1), got {}",
                self.drop_fraction
            )));
        }
        if self.frequency == 0 {
            return Err(Error::Config("update frequency must be >= 1".into()));
        }
        Ok(())
    }

    /// Updates happen at positive multiples of the frequency before the end
    /// step.
    pub fn is_update_step(&self, t: u64) -> bool {
        self.method != DstMethod::None
            && t > 0
            && self.frequency > 0
            && t % self.frequency == 0
            && t < self.end_step
    }
}

/// Fraction of active connections replaced at step `t`.
pub fn drop_fraction(cfg: &DstConfig, t: u64, lr: &LrSchedule) -> f64 {
    if t > cfg.end_step {
        return 0.0;
    }
    match cfg.schedule {
        DropSchedule::Cosine => {
            if cfg.end_step == 0 {
                return cfg.drop_fraction;
            }
            let x = t as f64 / cfg.end_step as f64;
            cfg.drop_fraction / 2.0 * (1.0 + (std::f64::consts::PI * x).cos())
        }
        DropSchedule::LrCoupled => {
            let lr0 = lr.initial();
            if lr0 == 0.0 {
                0.0
            } else {
                cfg.drop_fraction * lr.at(t) / lr0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerUpdate {
    pub layer: usize,
    pub dropped: Vec<usize>,
    pub grown: Vec<usize>,
    /// Connections that could not be regrown for lack of candidates.
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateReport {
    pub step: u64,
    pub alpha: f64,
    pub layers: Vec<LayerUpdate>,
}

impl UpdateReport {
    pub fn n_dropped(&self) -> usize {
        self.layers.iter().map(|l| l.dropped.len()).sum()
    }

    pub fn n_grown(&self) -> usize {
        self.layers.iter().map(|l| l.grown.len()).sum()
    }

    pub fn shortfall(&self) -> usize {
        self.layers.iter().map(|l| l.shortfall).sum()
    }
}

fn by_key_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// `k` positions from `candidates` with the smallest key.
fn smallest(mut keyed: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    keyed.sort_by(by_key_then_index);
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Positions chosen for growth among `candidates` (sorted, flat indices).
fn grow_positions(
    method: DstMethod,
    candidates: &[usize],
    grad: &[f64],
    k: usize,
    n: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let k = k.min(candidates.len());
    match method {
        DstMethod::None => Vec::new(),
        DstMethod::Rigl => smallest(candidates.iter().map(|&p| (-grad[p].abs(), p)).collect(), k),
        DstMethod::RiglInverted => {
            smallest(candidates.iter().map(|&p| (grad[p].abs(), p)).collect(), k)
        }
        DstMethod::Set => {
            if k == candidates.len() {
                return candidates.to_vec();
            }
            let mut eligible = vec![false; n];
            for &p in candidates {
                eligible[p] = true;
            }
            let mut out = Vec::with_capacity(k);
            while out.len() < k {
                let p = rng.gen_range(0..n);
                if eligible[p] {
                    eligible[p] = false;
                    out.push(p);
                }
            }
            out
        }
    }
}

/// Drop and grow choices for one layer: the `k` active positions with the
/// smallest `|w|`, and up to `k` positions chosen among those inactive
/// before the update by the method's criterion.
pub fn select_drop_grow(
    weights: &[f64],
    mask: &[bool],
    grad: &[f64],
    method: DstMethod,
    k: usize,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>) {
    let n = mask.len();
    let dropped = smallest(
        (0..n).filter(|&p| mask[p]).map(|p| (weights[p].abs(), p)).collect(),
        k,
    );
    let candidates: Vec<usize> = (0..n).filter(|&p| !mask[p]).collect();
    let grown = grow_positions(method, &candidates, grad, k, n, rng);
    (dropped, grown)
}

/// One drop-and-grow step on every sparse layer with drop fraction `alpha`.
///
/// `dense_grad` holds the gradient for all parameters in canonical order,
/// masked positions included. Fully dense layers are left alone.
pub fn update_masks(
    net: &mut MaskedNetwork,
    dense_grad: &[f64],
    method: DstMethod,
    alpha: f64,
    step: u64,
    rng: &mut Rng,
) -> Result<UpdateReport> {
    if dense_grad.len() != net.param_count() {
        return Err(Error::Dimension {
            expected: net.param_count(),
            got: dense_grad.len(),
        });
    }
    let offsets = net.weight_offsets();
    let mut report = UpdateReport {
        step,
        alpha,
        layers: Vec::new(),
    };
    if method == DstMethod::None || alpha <= 0.0 {
        return Ok(report);
    }
    for (li, layer) in net.weighted_mut().enumerate() {
        let n = layer.len();
        let active = layer.mask().active();
        if active == n {
            continue;
        }
        let k = ((alpha * active as f64).round() as usize).min(active);
        let grad = &dense_grad[offsets[li]..offsets[li] + n];
        let (dropped, grown) = select_drop_grow(
            layer.weights().data(),
            layer.mask().bits(),
            grad,
            method,
            k,
            rng,
        );
        for &p in &dropped {
            layer.set_mask_bit(p, false);
        }
        for &p in &grown {
            layer.set_mask_bit(p, true);
            layer.set_weight(p, 0.0);
        }
        report.layers.push(LayerUpdate {
            layer: li,
            shortfall: k - grown.len(),
            dropped,
            grown,
        });
    }
    Ok(report)
}

/// Mask update at `step` following `cfg`, with the drop fraction taken
/// from its schedule.
pub fn dst_update(
    net: &mut MaskedNetwork,
    dense_grad: &[f64],
    cfg: &DstConfig,
    step: u64,
    lr: &LrSchedule,
    rng: &mut Rng,
) -> Result<UpdateReport> {
    let alpha = drop_fraction(cfg, step, lr);
    update_masks(net, dense_grad, cfg.method, alpha, step, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    PerLayer,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub target_sparsity: f64,
    pub start_step: u64,
    pub end_step: u64,
    pub frequency: u64,
    pub scope: PruneScope,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::Config("pruning target must lie in [0, 1)".into()));
        }
        if self.start_step >= self.end_step {
            return Err(Error::Config("pruning needs start_step < end_step".into()));
        }
        if self.frequency == 0 {
            return Err(Error::Config("pruning frequency must be >= 1".into()));
        }
        Ok(())
    }

    /// Cubic sparsity ramp from 0 at `start_step` to the target at
    /// `end_step`.
    pub fn sparsity_at(&self, t: u64) -> f64 {
        if t <= self.start_step {
            return 0.0;
        }
        let frac = ((t - self.start_step) as f64 / (self.end_step - self.start_step) as f64).min(1.0);
        self.target_sparsity * (1.0 - (1.0 - frac).powi(3))
    }

    /// Steps on the frequency grid inside `[start_step, end_step]`, plus
    /// the end step itself.
    pub fn is_prune_step(&self, t: u64) -> bool {
        t >= self.start_step
            && t <= self.end_step
            && ((t - self.start_step) % self.frequency.max(1) == 0 || t == self.end_step)
    }
}

/// Masks the smallest-magnitude active weights until the scheduled sparsity
/// for `step` is met. Returns the number of newly masked weights.
pub fn prune_step(net: &mut MaskedNetwork, cfg: &PruneConfig, step: u64) -> usize {
    let s = cfg.sparsity_at(step);
    let mut removed = 0;
    match cfg.scope {
        PruneScope::PerLayer => {
            for layer in net.weighted_mut() {
                let target = ((1.0 - s) * layer.len() as f64).round() as usize;
                let active = layer.mask().active();
                if active <= target {
                    continue;
                }
                let w = layer.weights().data();
                let mask = layer.mask();
                let drop = smallest(
                    (0..layer.len())
                        .filter(|&p| mask.get(p))
                        .map(|p| (w[p].abs(), p))
                        .collect(),
                    active - target,
                );
                removed += drop.len();
                for p in drop {
                    layer.set_mask_bit(p, false);
                }
            }
        }
        PruneScope::Global => {
            let target = ((1.0 - s) * net.weight_count() as f64).round() as usize;
            let active = net.active_weights();
            if active <= target {
                return 0;
            }
            let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(active);
            for (li, layer) in net.weighted().enumerate() {
                let w = layer.weights().data();
                for p in (0..layer.len()).filter(|&p| layer.mask().get(p)) {
                    keyed.push((w[p].abs(), li, p));
                }
            }
            keyed.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(Ordering::Equal)
                    .then((a.1, a.2).cmp(&(b.1, b.2)))
            });
            keyed.truncate(active - target);
            removed = keyed.len();
            for (_, li, p) in keyed {
                net.layer_mut(li).set_mask_bit(p, false);
            }
        }
    }
    removed
}

/// A lottery ticket: the final pruning mask plus weights rewound to step
/// `k` of the run that produced it.
#[derive(Debug, Clone)]
pub struct LotteryState {
    pub k: u64,
    /// Dense initialization of the pruning run.
    pub init: MaskedNetwork,
    /// Weights at step `k`, masked by `masks`.
    pub rewound: MaskedNetwork,
    pub masks: Vec<Mask>,
    /// The trained, pruned network whose support defines `masks`.
    pub pruned: MaskedNetwork,
}

/// Builds a ticket from a pruning run's snapshots (keyed by step, must
/// contain steps 0 and `k`) and its final network.
pub fn extract_lottery(
    snapshots: &BTreeMap<u64, MaskedNetwork>,
    pruned: &MaskedNetwork,
    k: u64,
) -> Result<LotteryState> {
    let init = snapshots.get(&0).ok_or(Error::MissingCheckpoint(0))?;
    let at_k = snapshots.get(&k).ok_or(Error::MissingCheckpoint(k))?;
    if !at_k.same_architecture(pruned) {
        return Err(Error::Architecture("snapshot and pruned network differ".into()));
    }
    let masks = pruned.masks();
    let mut rewound = at_k.clone();
    rewound.set_masks(&masks)?;
    Ok(LotteryState {
        k,
        init: init.clone(),
        rewound,
        masks,
        pruned: pruned.clone(),
    })
}

/// A fresh initialization of `template`'s architecture on `masks`.
pub fn make_scratch(
    template: &MaskedNetwork,
    masks: &[Mask],
    scheme: InitScheme,
    rng: &mut Rng,
) -> Result<(MaskedNetwork, InitReport)> {
    let mut net = template.clone();
    net.set_masks(masks)?;
    net.step = 0;
    let report = initialize(&mut net, scheme, rng);
    Ok((net, report))
}
