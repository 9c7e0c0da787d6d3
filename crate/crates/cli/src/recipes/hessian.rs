//! Hessian spectra around mask updates on a small sparse MLP. Each
//! constructed update starts from a snapshot of a static sparse run; RigL
//! and SET are applied to copies of the same state, and the full-data
//! Hessian over active coordinates is decomposed before and after each.
//! A second part tracks the most negative eigenvalue during static, SET,
//! RigL and dense training.

use serde::{Deserialize, Serialize};
use sparselab::autodiff::loss_and_gradient;
use sparselab::data::Dataset;
use sparselab::dst::{update_masks, DstConfig, DstMethod};
use sparselab::flow::{full_hessian, spectrum, symmetry_defect, SpectrumEstimate, HESSIAN_CAP};
use sparselab::init::InitScheme;
use sparselab::rng::{derive, Stream};
use sparselab::sparsity::{DistributionKind, SparsityDistribution};
use sparselab::train::{train, LrPolicy, TrainConfig};
use sparselab::{MaskedNetwork, NetworkSpec};

use super::par_map;
use crate::config::DataSource;
use crate::output::{gnuplot_lines, ArtifactDir};
use crate::stats::mean;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HessianParams {
    pub data: DataSource,
    pub model: NetworkSpec,
    pub sparsity: f64,
    pub seeds: Vec<u64>,
    /// Snapshot steps of each seed's static run; one constructed update
    /// per (seed, step).
    pub update_steps: Vec<u64>,
    pub drop_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps at which the training-time track decomposes the Hessian.
    pub track_every: u64,
    pub track_update_every: u64,
}

impl Default for HessianParams {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                n: 256,
                classes: 4,
                dim: 12,
                separation: 2.0,
                seed: 7,
            },
            model: NetworkSpec::mlp(&[12, 32, 4], true),
            sparsity: 0.7,
            seeds: (0..4).collect(),
            update_steps: vec![20, 40, 60, 80, 100],
            drop_fraction: 0.3,
            epochs: 13,
            batch_size: 32,
            lr: 0.05,
            track_every: 10,
            track_update_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumRow {
    pub seed: u64,
    pub step: u64,
    pub phase: String,
    pub active: usize,
    pub symmetry_defect: f64,
    pub min: f64,
    pub max: f64,
    pub largest_negative: f64,
    pub negative_count: usize,
    pub density_integral: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRow {
    pub seed: u64,
    pub step: u64,
    pub method: String,
    pub before: f64,
    pub after: f64,
    pub change: f64,
    pub negative_before: usize,
    pub negative_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityRow {
    pub phase: String,
    pub lambda: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackRow {
    pub method: String,
    pub seed: u64,
    pub step: u64,
    pub largest_negative: f64,
}

pub struct HessianResult {
    pub spectra: Vec<SpectrumRow>,
    pub updates: Vec<UpdateRow>,
    pub density: Vec<DensityRow>,
    pub track: Vec<TrackRow>,
}

impl HessianResult {
    pub fn updates_of(&self, method: &str) -> Vec<&UpdateRow> {
        self.updates.iter().filter(|u| u.method == method).collect()
    }

    /// Fraction of `method` updates after which the most negative
    /// eigenvalue is at least as large in magnitude as before.
    pub fn non_decreasing_fraction(&self, method: &str) -> f64 {
        let u = self.updates_of(method);
        if u.is_empty() {
            return 0.0;
        }
        u.iter().filter(|r| r.after >= r.before).count() as f64 / u.len() as f64
    }

    pub fn mean_after(&self, method: &str) -> f64 {
        mean(&self.updates_of(method).iter().map(|r| r.after).collect::<Vec<_>>())
    }

    pub fn write(&self, dir: &mut ArtifactDir) -> Result<(), CliError> {
        dir.csv(
            "spectra.csv",
            &[
                "seed",
                "step",
                "phase",
                "active",
                "symmetry_defect",
                "min",
                "max",
                "largest_negative",
                "negative_count",
                "density_integral",
            ],
            &self.spectra,
        )?;
        dir.csv(
            "updates.csv",
            &[
                "seed",
                "step",
                "method",
                "before",
                "after",
                "change",
                "negative_before",
                "negative_after",
            ],
            &self.updates,
        )?;
        dir.csv("density.csv", &["phase", "lambda", "density"], &self.density)?;
        dir.csv("track.csv", &["method", "seed", "step", "largest_negative"], &self.track)?;
        dir.text(
            "density.gp",
            &gnuplot_lines("density.csv", "Hessian spectral density around one update", 2, 3, Some(1), true),
        )?;
        dir.text(
            "track.gp",
            &gnuplot_lines("track.csv", "largest negative eigenvalue during training", 3, 4, Some(1), false),
        )
    }
}

fn static_config(p: &HessianParams, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(p.model.clone(), seed);
    cfg.epochs = p.epochs;
    cfg.batch_size = p.batch_size;
    cfg.lr = p.lr;
    cfg.lr_policy = LrPolicy::Constant;
    cfg.weight_decay = 0.0;
    cfg.init = InitScheme::per_neuron();
    cfg.sparsity = Some(SparsityDistribution {
        kind: DistributionKind::Uniform,
        sparsity: p.sparsity,
        exclude: Vec::new(),
    });
    cfg.eval_every_epoch = false;
    cfg
}

fn decompose(net: &MaskedNetwork, data: &Dataset) -> Result<(SpectrumEstimate, f64), CliError> {
    let h = full_hessian(net, &data.train, HESSIAN_CAP).map_err(CliError::from_core)?;
    let defect = symmetry_defect(&h);
    Ok((spectrum(&h, None).map_err(CliError::from_core)?, defect))
}

fn spectrum_row(seed: u64, step: u64, phase: &str, net: &MaskedNetwork, s: &SpectrumEstimate, defect: f64) -> SpectrumRow {
    SpectrumRow {
        seed,
        step,
        phase: phase.to_string(),
        active: net.active_weights(),
        symmetry_defect: defect,
        min: s.min(),
        max: s.max(),
        largest_negative: s.largest_negative(),
        negative_count: s.eigenvalues.iter().filter(|&&l| l < 0.0).count(),
        density_integral: s.integral(),
    }
}

struct Constructed {
    spectra: Vec<SpectrumRow>,
    updates: Vec<UpdateRow>,
    density: Vec<DensityRow>,
}

/// Applies RigL and SET to copies of `state` with the full-data gradient.
fn construct(
    p: &HessianParams,
    data: &Dataset,
    seed: u64,
    index: u64,
    state: &MaskedNetwork,
) -> Result<Constructed, CliError> {
    let (x, y) = data.train.range(0, data.train.len());
    let (_, grad) = loss_and_gradient(state, &x, &y).map_err(CliError::from_core)?;
    let (before, d0) = decompose(state, data)?;
    let step = state.step;
    let mut out = Constructed {
        spectra: vec![spectrum_row(seed, step, "before", state, &before, d0)],
        updates: Vec::new(),
        density: Vec::new(),
    };
    let keep_density = seed == p.seeds[0] && index == 0;
    if keep_density {
        out.density.extend(before.density.iter().map(|&(l, d)| DensityRow {
            phase: "before".into(),
            lambda: l,
            density: d,
        }));
    }
    for method in [DstMethod::Rigl, DstMethod::Set] {
        let mut net = state.clone();
        let mut rng = derive(seed, Stream::Update, index);
        update_masks(&mut net, &grad.dense, method, p.drop_fraction, step, &mut rng).map_err(CliError::from_core)?;
        let (after, d) = decompose(&net, data)?;
        let name = method.name();
        out.spectra.push(spectrum_row(seed, step, name, &net, &after, d));
        let negatives = |s: &SpectrumEstimate| s.eigenvalues.iter().filter(|&&l| l < 0.0).count();
        out.updates.push(UpdateRow {
            seed,
            step,
            method: name.to_string(),
            before: before.largest_negative(),
            after: after.largest_negative(),
            change: after.largest_negative() - before.largest_negative(),
            negative_before: negatives(&before),
            negative_after: negatives(&after),
        });
        if keep_density {
            out.density.extend(after.density.iter().map(|&(l, d)| DensityRow {
                phase: name.to_string(),
                lambda: l,
                density: d,
            }));
        }
    }
    Ok(out)
}

fn track(p: &HessianParams, data: &Dataset, method: &str, seed: u64) -> Result<Vec<TrackRow>, CliError> {
    let mut cfg = static_config(p, seed);
    let total = cfg.steps_per_epoch(data.train.len()) * cfg.epochs as u64;
    let dst = match method {
        "rigl" => Some(DstMethod::Rigl),
        "set" => Some(DstMethod::Set),
        _ => None,
    };
    if method == "dense" {
        cfg.sparsity = None;
    }
    if let Some(m) = dst {
        cfg.dst = DstConfig {
            method: m,
            drop_fraction: p.drop_fraction,
            frequency: p.track_update_every.max(1),
            end_step: total,
            ..DstConfig::default()
        };
    }
    let every = p.track_every.max(1);
    cfg.snapshot_steps = (0..=total).step_by(every as usize).collect();
    let run = train(&cfg, data).map_err(CliError::from_core)?;
    let mut rows = Vec::new();
    for (&step, net) in &run.snapshots {
        let (s, _) = decompose(net, data)?;
        rows.push(TrackRow {
            method: method.to_string(),
            seed,
            step,
            largest_negative: s.largest_negative(),
        });
    }
    Ok(rows)
}

pub fn run(p: &HessianParams, data: &Dataset) -> Result<HessianResult, CliError> {
    if p.seeds.is_empty() || p.update_steps.is_empty() {
        return Err(CliError::Config("hessian-suite needs seeds and update steps".into()));
    }
    if !(0.0..1.0).contains(&p.sparsity) || !(p.drop_fraction > 0.0 && p.drop_fraction < 1.0) {
        return Err(CliError::Config("sparsity must lie in [0, 1) and drop_fraction in (0, 1)".into()));
    }
    let states = par_map(p.seeds.clone(), |seed| {
        let mut cfg = static_config(p, seed);
        cfg.snapshot_steps = p.update_steps.clone();
        let run = train(&cfg, data).map_err(CliError::from_core)?;
        p.update_steps
            .iter()
            .map(|s| {
                run.snapshots
                    .get(s)
                    .cloned()
                    .ok_or_else(|| CliError::Config(format!("update step {s} is past the end of the run")))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let jobs: Vec<(u64, u64, &MaskedNetwork)> = p
        .seeds
        .iter()
        .zip(&states)
        .flat_map(|(&seed, nets)| nets.iter().enumerate().map(move |(i, n)| (seed, i as u64, n)))
        .collect();
    let built = par_map(jobs, |(seed, i, net)| construct(p, data, seed, i, net))?;

    let methods = ["static", "set", "rigl", "dense"];
    let track_jobs: Vec<(&str, u64)> = methods
        .iter()
        .flat_map(|&m| p.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let tracks = par_map(track_jobs, |(m, s)| track(p, data, m, s))?;

    let mut out = HessianResult {
        spectra: Vec::new(),
        updates: Vec::new(),
        density: Vec::new(),
        track: tracks.into_iter().flatten().collect(),
    };
    for c in built {
        out.spectra.extend(c.spectra);
        out.updates.extend(c.updates);
        out.density.extend(c.density);
    }
    Ok(out)
}
