//! The training protocol shared by the MNIST recipes: one base
//! [`TrainConfig`] plus the knobs that distinguish variants (initialization,
//! mask source, DST method, pruning), all schedule positions expressed as
//! fractions of the run so that shortened desk runs keep their shape.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sparselab::data::{evaluate, Dataset, Evaluation};
use sparselab::dst::{make_scratch, DropSchedule, DstConfig, DstMethod, PruneConfig, PruneScope};
use sparselab::init::InitScheme;
use sparselab::network::LayerSpec;
use sparselab::rng::{derive, Stream};
use sparselab::sparsity::{DistributionKind, SparsityDistribution};
use sparselab::train::{train, train_from, RunArtifacts, TrainConfig};
use sparselab::{build_network, Mask, NetworkSpec};

use crate::config::DataSource;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    /// Masks drawn at random with the configured layer distribution.
    Random,
    /// Final masks of a dense run with gradual magnitude pruning, one
    /// pruning run per seed.
    Pruning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Static,
    Set,
    Rigl,
    RiglInverted,
    SmallDense,
    Dense,
    Pruning,
    Lottery,
}

/// A named training variant. A trailing `+` selects the per-neuron
/// sparse initialization, otherwise sparse variants use masked-dense.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub method: Method,
    pub sparse_init: bool,
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let (base, plus) = match s.strip_suffix('+') {
            Some(b) => (b, true),
            None => (s, false),
        };
        let method = match base {
            "scratch" | "static" => Method::Static,
            "set" => Method::Set,
            "rigl" => Method::Rigl,
            "rigl-inverted" => Method::RiglInverted,
            "small-dense" => Method::SmallDense,
            "dense" => Method::Dense,
            "pruning" => Method::Pruning,
            "lottery" => Method::Lottery,
            _ => return Err(CliError::Config(format!("unknown variant '{s}'"))),
        };
        Ok(Variant {
            name: s.to_string(),
            method,
            sparse_init: plus,
        })
    }
}

impl Variant {
    pub fn dst_method(&self) -> Option<DstMethod> {
        match self.method {
            Method::Static => Some(DstMethod::None),
            Method::Set => Some(DstMethod::Set),
            Method::Rigl => Some(DstMethod::Rigl),
            Method::RiglInverted => Some(DstMethod::RiglInverted),
            _ => None,
        }
    }

    pub fn init(&self) -> InitScheme {
        if self.sparse_init {
            InitScheme::per_neuron()
        } else {
            InitScheme::masked_dense()
        }
    }
}

pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>, CliError> {
    names.iter().map(|n| n.parse()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub data: DataSource,
    /// Base optimizer and model settings. Initialization, sparsity, DST,
    /// pruning and weight decay are overwritten per variant.
    pub train: TrainConfig,
    pub sparsity: f64,
    /// Layer distribution for random masks.
    pub distribution: DistributionKind,
    pub masks: MaskSource,
    pub wd_per_neuron: f64,
    pub wd_masked_dense: f64,
    /// Weight decay of pruning and lottery-ticket runs.
    pub wd_pruning: f64,
    pub drop_fraction: f64,
    pub update_every: u64,
    pub update_end_fraction: f64,
    pub drop_schedule: DropSchedule,
    pub prune_start_fraction: f64,
    pub prune_end_fraction: f64,
    pub prune_every: u64,
    pub prune_scope: PruneScope,
    /// Rewind step K of lottery tickets.
    pub rewind_step: u64,
    pub seeds: Vec<u64>,
}

impl Default for Protocol {
    /// MNIST/LeNet5 settings: 30 epochs of batch 128, cosine decay from
    /// 0.1, momentum 0.9, 95% sparsity, pruning between 3000 and 7000 of
    /// 11719 steps every 100, DST every 500 steps with drop fraction 0.3
    /// decaying with the learning rate.
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            train: TrainConfig::new(NetworkSpec::lenet5(), 0),
            sparsity: 0.95,
            distribution: DistributionKind::Uniform,
            masks: MaskSource::Pruning,
            wd_per_neuron: 2e-4,
            wd_masked_dense: 1e-5,
            wd_pruning: 0.0,
            drop_fraction: 0.3,
            update_every: 500,
            update_end_fraction: 1.0,
            drop_schedule: DropSchedule::LrCoupled,
            prune_start_fraction: 3000.0 / 11719.0,
            prune_end_fraction: 7000.0 / 11719.0,
            prune_every: 100,
            prune_scope: PruneScope::PerLayer,
            rewind_step: 0,
            seeds: (0..5).collect(),
        }
    }
}

fn core(e: sparselab::Error) -> CliError {
    CliError::from_core(e)
}

/// Model with every hidden width and channel count scaled by `factor`.
pub fn scaled_spec(spec: &NetworkSpec, factor: f64) -> NetworkSpec {
    let last = spec
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. }));
    let scale = |n: usize| ((n as f64 * factor).round() as usize).max(1);
    let layers = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            LayerSpec::Dense { outputs, activation, bias } if Some(i) != last => LayerSpec::Dense {
                outputs: scale(*outputs),
                activation: *activation,
                bias: *bias,
            },
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                padding,
                activation,
                bias,
            } if Some(i) != last => LayerSpec::Conv2d {
                out_channels: scale(*out_channels),
                kernel: *kernel,
                padding: *padding,
                activation: *activation,
                bias: *bias,
            },
            other => other.clone(),
        })
        .collect();
    NetworkSpec {
        input_shape: spec.input_shape.clone(),
        layers,
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad("sparsity must lie in [0, 1)");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.prune_start_fraction >= 0.0
            && self.prune_start_fraction < self.prune_end_fraction
            && self.prune_end_fraction <= 1.0)
        {
            return bad("pruning fractions must satisfy 0 <= start < end <= 1");
        }
        if !(self.update_end_fraction > 0.0 && self.update_end_fraction <= 1.0) {
            return bad("update_end_fraction must lie in (0, 1]");
        }
        self.train.validate().map_err(core)
    }

    pub fn total_steps(&self, data: &Dataset) -> u64 {
        self.train.steps_per_epoch(data.train.len()) * self.train.epochs as u64
    }

    fn at(&self, fraction: f64, total: u64) -> u64 {
        (fraction * total as f64).round() as u64
    }

    pub fn prune_config(&self, total: u64) -> PruneConfig {
        PruneConfig {
            target_sparsity: self.sparsity,
            start_step: self.at(self.prune_start_fraction, total),
            end_step: self.at(self.prune_end_fraction, total).max(1),
            frequency: self.prune_every.max(1),
            scope: self.prune_scope,
        }
    }

    pub fn dst_config(&self, method: DstMethod, total: u64) -> DstConfig {
        DstConfig {
            method,
            drop_fraction: self.drop_fraction,
            frequency: self.update_every.max(1),
            end_step: self.at(self.update_end_fraction, total).max(1),
            schedule: self.drop_schedule,
        }
    }

    fn base(&self, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        cfg.sparsity = None;
        cfg.prune = None;
        cfg.dst = DstConfig::default();
        cfg
    }

    /// Dense training with gradual magnitude pruning to the target, with a
    /// snapshot at the rewind step.
    pub fn pruning_config(&self, data: &Dataset, seed: u64) -> TrainConfig {
        let mut cfg = self.base(seed);
        cfg.init = InitScheme::per_neuron();
        cfg.weight_decay = self.wd_pruning;
        cfg.prune = Some(self.prune_config(self.total_steps(data)));
        cfg.snapshot_steps = vec![self.rewind_step];
        cfg
    }

    pub fn pruning_run(&self, data: &Dataset, seed: u64) -> Result<RunArtifacts, CliError> {
        train(&self.pruning_config(data, seed), data).map_err(core)
    }

    /// Like [`Protocol::pruning_run`], reusing a run from `cache` whose
    /// configuration is identical.
    pub fn pruning_run_cached(&self, data: &Dataset, seed: u64, cache: &[RunArtifacts]) -> Result<RunArtifacts, CliError> {
        let cfg = self.pruning_config(data, seed);
        match cache.iter().find(|r| r.config == cfg) {
            Some(r) => Ok(r.clone()),
            None => train(&cfg, data).map_err(core),
        }
    }

    /// Masks for `seed`: `None` when they are drawn at random inside the
    /// run, otherwise the masks of that seed's pruning run.
    pub fn masks_for(&self, data: &Dataset, seed: u64) -> Result<Option<Vec<Mask>>, CliError> {
        match self.masks {
            MaskSource::Random => Ok(None),
            MaskSource::Pruning => Ok(Some(self.pruning_run(data, seed)?.net.masks())),
        }
    }

    /// Static or dynamic sparse training of `variant` on `masks` (or on a
    /// random mask when `None`).
    pub fn sparse_run(
        &self,
        data: &Dataset,
        variant: &Variant,
        masks: Option<&[Mask]>,
        seed: u64,
    ) -> Result<RunArtifacts, CliError> {
        let method = variant
            .dst_method()
            .ok_or_else(|| CliError::Config(format!("'{}' is not a sparse variant", variant.name)))?;
        let mut cfg = self.base(seed);
        cfg.init = variant.init();
        cfg.weight_decay = if variant.sparse_init {
            self.wd_per_neuron
        } else {
            self.wd_masked_dense
        };
        cfg.dst = self.dst_config(method, self.total_steps(data));
        match masks {
            None => {
                cfg.sparsity = Some(SparsityDistribution {
                    kind: self.distribution.clone(),
                    sparsity: self.sparsity,
                    exclude: Vec::new(),
                });
                train(&cfg, data).map_err(core)
            }
            Some(m) => {
                let template = build_network(&cfg.model).map_err(core)?;
                let (net, report) =
                    make_scratch(&template, m, cfg.init, &mut derive(seed, Stream::Init, 0)).map_err(core)?;
                let mut run = train_from(&cfg, data, net, None).map_err(core)?;
                run.init_report = report;
                Ok(run)
            }
        }
    }

    /// Dense training of the full model, or of one with about the sparse
    /// parameter count when `small`.
    pub fn dense_run(&self, data: &Dataset, small: bool, seed: u64) -> Result<RunArtifacts, CliError> {
        let mut cfg = self.base(seed);
        if small {
            cfg.model = scaled_spec(&cfg.model, (1.0 - self.sparsity).sqrt());
        }
        cfg.init = InitScheme::per_neuron();
        cfg.weight_decay = self.wd_per_neuron;
        train(&cfg, data).map_err(core)
    }

    /// Retrains the lottery ticket of `pruned` (rewound to step K, final
    /// masks) with the data order of `seed`.
    pub fn lottery_run(&self, data: &Dataset, pruned: &RunArtifacts, seed: u64) -> Result<RunArtifacts, CliError> {
        let lt = pruned.lottery(self.rewind_step).map_err(core)?;
        let mut cfg = self.base(seed);
        cfg.weight_decay = self.wd_pruning;
        train_from(&cfg, data, lt.rewound, None).map_err(core)
    }

    /// Fresh per-neuron initialization on `masks`, trained like a ticket.
    pub fn scratch_run(&self, data: &Dataset, masks: &[Mask], seed: u64) -> Result<RunArtifacts, CliError> {
        let mut cfg = self.base(seed);
        cfg.weight_decay = self.wd_pruning;
        let template = build_network(&cfg.model).map_err(core)?;
        let (net, _) = make_scratch(&template, masks, InitScheme::per_neuron(), &mut derive(seed, Stream::Scratch, 0))
            .map_err(core)?;
        train_from(&cfg, data, net, None).map_err(core)
    }

    /// Runs any variant. Lottery variants need the pruning run of the seed.
    pub fn run_variant(
        &self,
        data: &Dataset,
        variant: &Variant,
        masks: Option<&[Mask]>,
        pruned: Option<&RunArtifacts>,
        seed: u64,
    ) -> Result<RunArtifacts, CliError> {
        match variant.method {
            Method::SmallDense => self.dense_run(data, true, seed),
            Method::Dense => self.dense_run(data, false, seed),
            Method::Pruning => match pruned {
                Some(p) => Ok(p.clone()),
                None => self.pruning_run(data, seed),
            },
            Method::Lottery => {
                let owned;
                let p = match pruned {
                    Some(p) => p,
                    None => {
                        owned = self.pruning_run(data, seed)?;
                        &owned
                    }
                };
                self.lottery_run(data, p, seed)
            }
            _ => self.sparse_run(data, variant, masks, seed),
        }
    }
}

pub fn test_eval(run: &RunArtifacts, data: &Dataset) -> Result<Evaluation, CliError> {
    evaluate(&run.net, &data.test).map_err(core)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names() {
        let v: Variant = "rigl+".parse().unwrap();
        assert_eq!((v.method, v.sparse_init), (Method::Rigl, true));
        assert_eq!(v.init(), InitScheme::per_neuron());
        let v: Variant = "scratch".parse().unwrap();
        assert_eq!(v.init(), InitScheme::masked_dense());
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn small_dense_scales_hidden_layers_only() {
        let s = scaled_spec(&NetworkSpec::mlp(&[784, 300, 100, 10], true), 0.5);
        let widths: Vec<usize> = s
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense { outputs, .. } => *outputs,
                _ => 0,
            })
            .collect();
        assert_eq!(widths, vec![150, 50, 10]);
    }

    #[test]
    fn fractions_become_steps() {
        let p = Protocol::default();
        let c = p.prune_config(11719);
        assert_eq!((c.start_step, c.end_step, c.frequency), (3000, 7000, 100));
        assert_eq!(p.dst_config(DstMethod::Rigl, 11719).end_step, 11719);
    }
}
