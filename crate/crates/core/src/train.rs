//! SGD with momentum over masked networks, with mask-update, pruning,
//! snapshot and gradient-flow hooks.
//!
//! Step `t` (zero-based) proceeds as follows:
//!
//! 1. take minibatch `t mod steps_per_epoch` of the epoch's permutation;
//! 2. if `t` is a scheduled mask-update step, run the update with the
//!    gradient of that batch *instead of* the optimizer step;
//! 3. otherwise apply `v <- m v + g + wd theta`, `theta <- theta - lr(t) v`
//!    on active coordinates;
//! 4. prune if `t` lies on the pruning grid;
//! 5. advance the step counter, then log and snapshot.
//!
//! Every random draw comes from a stream derived from the run seed and the
//! epoch or step index, so a run resumed from a snapshot (weights, masks,
//! velocity, step) continues exactly as an uninterrupted one.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::loss_and_gradient;
use crate::data::{evaluate, Dataset, Split};
use crate::dst::{dst_update, extract_lottery, DstConfig, LotteryState, PruneConfig, UpdateReport};
use crate::error::{Error, Result};
use crate::flow::{flow_record, gradient_flow, FlowDelta, FlowTag, GradFlowRecord};
use crate::init::{initialize, InitReport, InitScheme};
use crate::network::{build_network, MaskedNetwork, NetworkSpec};
use crate::rng::{derive, Stream};
use crate::schedule::LrSchedule;
use crate::sparsity::{allocate_sparsity, SparsityDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrPolicy {
    Constant,
    /// Cosine decay to zero over the whole run.
    Cosine,
    /// Linear warm-up, then a factor `gamma` at each milestone epoch.
    WarmupStep {
        warmup_epochs: usize,
        milestones: Vec<usize>,
        gamma: f64,
    },
}

fn default_probe() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: NetworkSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_policy: LrPolicy,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Initial sparsity; `None` trains dense (unless pruning).
    #[serde(default)]
    pub sparsity: Option<SparsityDistribution>,
    pub init: InitScheme,
    #[serde(default)]
    pub dst: DstConfig,
    #[serde(default)]
    pub prune: Option<PruneConfig>,
    pub seed: u64,
    /// Use only the first `n` training examples.
    #[serde(default)]
    pub train_subset: Option<usize>,
    /// Steps at which the network is snapshotted (step 0 always is).
    #[serde(default)]
    pub snapshot_steps: Vec<u64>,
    /// Log gradient flow on the probe batch every this many steps,
    /// starting with the initial state.
    #[serde(default)]
    pub flow_every: Option<u64>,
    /// Size of the fixed held-out batch used for periodic gradient flow.
    #[serde(default = "default_probe")]
    pub flow_probe: usize,
    /// Measure gradient flow before and after every mask update.
    #[serde(default)]
    pub record_update_deltas: bool,
    /// Evaluate on the test split after every epoch.
    #[serde(default)]
    pub eval_every_epoch: bool,
}

impl TrainConfig {
    /// Defaults for MNIST-scale runs: 30 epochs, batch 128, cosine decay
    /// from 0.1, momentum 0.9, per-neuron He init.
    pub fn new(model: NetworkSpec, seed: u64) -> Self {
        Self {
            model,
            epochs: 30,
            batch_size: 128,
            lr: 0.1,
            lr_policy: LrPolicy::Cosine,
            momentum: 0.9,
            weight_decay: 2e-4,
            sparsity: None,
            init: InitScheme::per_neuron(),
            dst: DstConfig::default(),
            prune: None,
            seed,
            train_subset: None,
            snapshot_steps: Vec::new(),
            flow_every: None,
            flow_probe: default_probe(),
            record_update_deltas: false,
            eval_every_epoch: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if let LrPolicy::WarmupStep { milestones, gamma, .. } = &self.lr_policy {
            if milestones.windows(2).any(|w| w[0] >= w[1]) || *gamma < 0.0 {
                return bad("warm-up milestones must increase and gamma be >= 0".into());
            }
        }
        if self.train_subset == Some(0) {
            return bad("training subset must be non-empty".into());
        }
        self.dst.validate()?;
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        let n = self.train_subset.map_or(train_len, |s| s.min(train_len));
        n.div_ceil(self.batch_size) as u64
    }

    pub fn lr_schedule(&self, steps_per_epoch: u64) -> LrSchedule {
        let total = steps_per_epoch * self.epochs as u64;
        match &self.lr_policy {
            LrPolicy::Constant => LrSchedule::Constant { lr: self.lr },
            LrPolicy::Cosine => LrSchedule::Cosine {
                lr0: self.lr,
                total_steps: total,
            },
            LrPolicy::WarmupStep {
                warmup_epochs,
                milestones,
                gamma,
            } => LrSchedule::WarmupStep {
                lr0: self.lr,
                warmup_steps: *warmup_epochs as u64 * steps_per_epoch,
                milestones: milestones.iter().map(|&e| e as u64 * steps_per_epoch).collect(),
                gamma: *gamma,
            },
        }
    }

    /// Network with allocated masks and initialized weights.
    pub fn initial_network(&self) -> Result<(MaskedNetwork, InitReport)> {
        let mut net = build_network(&self.model)?;
        if let Some(dist) = &self.sparsity {
            net = allocate_sparsity(net, dist, &mut derive(self.seed, Stream::Mask, 0))?;
        }
        let report = initialize(&mut net, self.init, &mut derive(self.seed, Stream::Init, 0));
        Ok((net, report))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub report: UpdateReport,
    pub flow: Option<FlowDelta>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    pub net: MaskedNetwork,
    pub velocity: Vec<f64>,
    pub snapshots: BTreeMap<u64, MaskedNetwork>,
    pub flow: Vec<GradFlowRecord>,
    pub updates: Vec<UpdateRecord>,
    pub epochs: Vec<EpochRecord>,
    pub init_report: InitReport,
    pub total_steps: u64,
}

impl RunArtifacts {
    pub fn lottery(&self, k: u64) -> Result<LotteryState> {
        extract_lottery(&self.snapshots, &self.net, k)
    }
}

/// `v <- m v + g + wd theta`, `theta <- theta - lr v` on active entries.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    active: &[bool],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for i in 0..params.len() {
        if !active[i] {
            continue;
        }
        let g = grad[i] + weight_decay * params[i];
        velocity[i] = momentum * velocity[i] + g;
        params[i] -= lr * velocity[i];
    }
}

/// Runs `config` from a freshly initialized network.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<RunArtifacts> {
    config.validate()?;
    let (net, report) = config.initial_network()?;
    let mut run = train_from(config, data, net, None)?;
    run.init_report = report;
    Ok(run)
}

fn permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive(seed, Stream::Shuffle, epoch));
    order
}

/// Continues training `net` from `net.step` to the end of the schedule.
/// `velocity` restores optimizer state (zero when `None`).
pub fn train_from(
    config: &TrainConfig,
    data: &Dataset,
    mut net: MaskedNetwork,
    velocity: Option<Vec<f64>>,
) -> Result<RunArtifacts> {
    config.validate()?;
    let train_split: Split = match config.train_subset {
        Some(n) => data.train.head(n),
        None => data.train.clone(),
    };
    if train_split.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let n = train_split.len();
    let spe = config.steps_per_epoch(n);
    let total = spe * config.epochs as u64;
    let lr = config.lr_schedule(spe);
    let mut dst = config.dst.clone();
    if dst.end_step == 0 {
        dst.end_step = total * 3 / 4;
    }
    let mut velocity = velocity.unwrap_or_else(|| vec![0.0; net.param_count()]);
    if velocity.len() != net.param_count() {
        return Err(Error::Dimension {
            expected: net.param_count(),
            got: velocity.len(),
        });
    }
    let probe = data.test.head(config.flow_probe);
    let (probe_x, probe_y) = probe.range(0, probe.len());
    let snapshot_at: BTreeSet<u64> = config.snapshot_steps.iter().copied().collect();

    let mut run = RunArtifacts {
        config: config.clone(),
        net: net.clone(),
        velocity: Vec::new(),
        snapshots: BTreeMap::from([(net.step, net.clone())]),
        flow: Vec::new(),
        updates: Vec::new(),
        epochs: Vec::new(),
        init_report: InitReport::default(),
        total_steps: total,
    };
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut epoch_loss = 0.0;
    let mut epoch_batches = 0usize;

    if let Some(every) = config.flow_every {
        if every > 0 && net.step % every == 0 && net.step < total {
            run.flow
                .push(flow_record(&net, &probe_x, &probe_y, FlowTag::Periodic, "probe")?);
        }
    }
    for t in net.step..total {
        let epoch = t / spe;
        if epoch != order_epoch {
            order = permutation(config.seed, epoch, n);
            order_epoch = epoch;
        }
        let within = (t % spe) as usize;
        let idx = &order[within * config.batch_size..((within + 1) * config.batch_size).min(n)];
        let (x, y) = train_split.batch(idx);
        let diverged = |loss: f64| Error::Diverged {
            step: t,
            loss,
            snapshot: Box::new(crate::checkpoint::encode(&net, Some(&velocity))),
        };
        let (loss, grad) = match loss_and_gradient(&net, &x, &y) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        epoch_loss += loss;
        epoch_batches += 1;

        if dst.is_update_step(t) {
            let before = grad.masked.squared_norm();
            let report = dst_update(
                &mut net,
                &grad.dense,
                &dst,
                t,
                &lr,
                &mut derive(config.seed, Stream::Update, t),
            )?;
            for (v, active) in velocity.iter_mut().zip(net.param_mask()) {
                if !active {
                    *v = 0.0;
                }
            }
            let offsets = net.weight_offsets();
            for l in &report.layers {
                for &p in &l.grown {
                    velocity[offsets[l.layer] + p] = 0.0;
                }
            }
            let flow = if config.record_update_deltas {
                let after = gradient_flow(&net, &x, &y)?;
                Some(FlowDelta {
                    before,
                    after,
                    delta: after - before,
                })
            } else {
                None
            };
            run.updates.push(UpdateRecord { report, flow });
        } else {
            let mut params = net.params();
            sgd_momentum_step(
                &mut params,
                &grad.masked,
                &mut velocity,
                &net.param_mask(),
                lr.at(t),
                config.momentum,
                config.weight_decay,
            );
            net.set_params(&params)?;
        }

        if let Some(p) = &config.prune {
            if p.is_prune_step(t) && crate::dst::prune_step(&mut net, p, t) > 0 {
                for (v, active) in velocity.iter_mut().zip(net.param_mask()) {
                    if !active {
                        *v = 0.0;
                    }
                }
            }
        }

        net.step = t + 1;
        if let Some(every) = config.flow_every {
            if every > 0 && (t + 1) % every == 0 {
                run.flow
                    .push(flow_record(&net, &probe_x, &probe_y, FlowTag::Periodic, "probe")?);
            }
        }
        if snapshot_at.contains(&net.step) {
            run.snapshots.insert(net.step, net.clone());
        }
        if net.step % spe == 0 {
            let (test_loss, test_accuracy) = if config.eval_every_epoch {
                let e = evaluate(&net, &data.test)?;
                (Some(e.loss), Some(e.accuracy))
            } else {
                (None, None)
            };
            run.epochs.push(EpochRecord {
                epoch: epoch as usize,
                step: net.step,
                train_loss: epoch_loss / epoch_batches.max(1) as f64,
                test_loss,
                test_accuracy,
            });
            epoch_loss = 0.0;
            epoch_batches = 0;
        }
    }
    run.net = net;
    run.velocity = velocity;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;

    fn small_config(seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(NetworkSpec::mlp(&[6, 8, 3], true), seed);
        c.epochs = 2;
        c.batch_size = 16;
        c.lr = 0.05;
        c
    }

    #[test]
    fn zero_rate_keeps_weights() {
        let data = make_synthetic(64, 3, 6, 1).unwrap();
        let mut c = small_config(1);
        c.lr = 0.0;
        c.momentum = 0.0;
        let run = train(&c, &data).unwrap();
        assert_eq!(run.net.params(), run.snapshots[&0].params());
    }

    #[test]
    fn runs_are_deterministic() {
        let data = make_synthetic(64, 3, 6, 1).unwrap();
        let a = train(&small_config(4), &data).unwrap();
        let b = train(&small_config(4), &data).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn momentum_on_quadratic() {
        // L = 0.5 * 2 * x^2, gradient 2x, from x = 1 with lr 0.1, m 0.9.
        let (mut x, mut v) = ([1.0], [0.0]);
        sgd_momentum_step(&mut x, &[2.0], &mut v, &[true], 0.1, 0.9, 0.0);
        assert_eq!((x[0], v[0]), (0.8, 2.0));
        let g = [2.0 * x[0]];
        sgd_momentum_step(&mut x, &g, &mut v, &[true], 0.1, 0.9, 0.0);
        assert!((v[0] - 3.4).abs() < 1e-15);
        assert!((x[0] - 0.46).abs() < 1e-15);
        let (mut y, mut w) = ([1.0, 5.0], [0.0, 0.0]);
        sgd_momentum_step(&mut y, &[1.0, 1.0], &mut w, &[true, false], 0.5, 0.0, 1.0);
        assert_eq!(y, [0.0, 5.0]);
    }

    #[test]
    fn invalid_configs_fail() {
        let mut c = small_config(0);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = small_config(0);
        c.lr = -0.1;
        assert!(c.validate().is_err());
    }
}
