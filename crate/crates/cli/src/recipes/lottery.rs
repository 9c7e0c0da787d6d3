//! Lottery tickets against the pruning solution they come from: L2
//! distances, linear interpolation, MDS embedding and function
//! similarity, with random re-initializations on the same mask as the
//! control.

use serde::{Deserialize, Serialize};
use sparselab::data::{predict_proba, Dataset};
use sparselab::landscape::{
    alpha_grid, barrier, interpolate_loss, l2_distance, mds_embed, similarity_report, InterpolationPoint,
    ParamPoint, PointLabel, Predictions, SimilarityReport,
};
use sparselab::train::RunArtifacts;
use sparselab::MaskedNetwork;

use super::par_map;
use super::protocol::{test_eval, Protocol};
use crate::output::{gnuplot_lines, ArtifactDir};
use crate::stats::{mean, std};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LotteryParams {
    pub protocol: Protocol,
    /// Seed of the pruning run whose mask and early weights define the
    /// ticket.
    pub pruning_seed: u64,
    pub interpolation_points: usize,
    /// Training examples on which interpolation losses are measured.
    pub interpolation_examples: usize,
    /// Also train the other seeds' pruning solutions as a baseline.
    pub diff_pruned: bool,
}

impl Default for LotteryParams {
    fn default() -> Self {
        let mut protocol = Protocol::default();
        protocol.wd_per_neuron = 0.0;
        protocol.wd_masked_dense = 0.0;
        protocol.wd_pruning = 0.0;
        Self {
            protocol,
            pruning_seed: 0,
            interpolation_points: 21,
            interpolation_examples: 10_000,
            diff_pruned: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub group: String,
    pub seed: u64,
    pub d_start: f64,
    pub d_end: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpolationRow {
    pub path: String,
    pub seed: u64,
    pub alpha: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarrierRow {
    pub path: String,
    pub seed: u64,
    pub start_loss: f64,
    pub end_loss: f64,
    pub max_loss: f64,
    pub barrier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MdsRow {
    pub label: String,
    pub seed: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub group: String,
    pub models: usize,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub ensemble_accuracy: f64,
    pub ensemble_gain: f64,
    pub disagreement: f64,
    pub disagreement_std: f64,
    pub disagreement_with_pruned: f64,
    pub disagreement_with_pruned_std: f64,
    pub kl: f64,
    pub kl_with_pruned: f64,
    pub jsd: f64,
    pub jsd_with_pruned: f64,
    pub floored: usize,
}

pub struct LotteryResult {
    pub distances: Vec<DistanceRow>,
    pub interpolation: Vec<InterpolationRow>,
    pub barriers: Vec<BarrierRow>,
    pub mds: Vec<MdsRow>,
    pub mds_stress: f64,
    pub similarity: Vec<SimilarityRow>,
    pub pruned_accuracy: f64,
}

impl LotteryResult {
    pub fn mean_distance(&self, group: &str) -> (f64, f64) {
        let rows: Vec<&DistanceRow> = self.distances.iter().filter(|r| r.group == group).collect();
        (
            mean(&rows.iter().map(|r| r.d_start).collect::<Vec<_>>()),
            mean(&rows.iter().map(|r| r.d_end).collect::<Vec<_>>()),
        )
    }

    pub fn barriers_of(&self, path: &str) -> Vec<&BarrierRow> {
        self.barriers.iter().filter(|b| b.path == path).collect()
    }

    pub fn similarity_of(&self, group: &str) -> Option<&SimilarityRow> {
        self.similarity.iter().find(|s| s.group == group)
    }

    pub fn write(&self, dir: &mut ArtifactDir) -> Result<(), CliError> {
        dir.csv("distances.csv", &["group", "seed", "d_start", "d_end", "test_accuracy"], &self.distances)?;
        dir.csv("interpolation.csv", &["path", "seed", "alpha", "loss", "accuracy"], &self.interpolation)?;
        dir.csv(
            "barriers.csv",
            &["path", "seed", "start_loss", "end_loss", "max_loss", "barrier"],
            &self.barriers,
        )?;
        dir.csv("mds.csv", &["label", "seed", "x", "y"], &self.mds)?;
        dir.csv(
            "similarity.csv",
            &[
                "group",
                "models",
                "test_accuracy_mean",
                "test_accuracy_std",
                "ensemble_accuracy",
                "ensemble_gain",
                "disagreement",
                "disagreement_std",
                "disagreement_with_pruned",
                "disagreement_with_pruned_std",
                "kl",
                "kl_with_pruned",
                "jsd",
                "jsd_with_pruned",
                "floored",
            ],
            &self.similarity,
        )?;
        dir.text(
            "interpolation.gp",
            &gnuplot_lines("interpolation.csv", "linear paths to the pruning solution", 3, 4, Some(1), false),
        )?;
        let mds = "set datafile separator ','\nset terminal pngcairo size 700,700\nset output 'mds.png'\n\
                   set title 'MDS of sparse solutions'\n\
                   plot for [k in 'pruned-soln lt-init lt-soln scratch-init scratch-soln'] 'mds.csv' \
                   using (strcol(1) eq k ? $3 : 1/0):4 with points pt 7 title k\n";
        dir.text("mds.gp", mds)
    }
}

fn initial_state(run: &RunArtifacts) -> &MaskedNetwork {
    run.snapshots.values().next().expect("the starting state is always snapshotted")
}

fn predictions(net: &MaskedNetwork, data: &Dataset) -> Result<Predictions, CliError> {
    let probs = predict_proba(net, &data.test).map_err(CliError::from_core)?;
    Predictions::new(net.classes(), probs).map_err(CliError::from_core)
}

fn off_diagonal(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j > i).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .collect()
}

fn similarity_row(group: &str, r: &SimilarityReport) -> SimilarityRow {
    let pair = off_diagonal(&r.disagreement);
    let acc: Vec<f64> = r.individual_accuracy.clone();
    SimilarityRow {
        group: group.to_string(),
        models: acc.len(),
        test_accuracy_mean: mean(&acc),
        test_accuracy_std: std(&acc),
        ensemble_accuracy: r.ensemble_accuracy,
        ensemble_gain: r.ensemble_gain(),
        disagreement: r.mean_pairwise_disagreement(),
        disagreement_std: std(&pair),
        disagreement_with_pruned: mean(&r.disagreement_with_pruned),
        disagreement_with_pruned_std: std(&r.disagreement_with_pruned),
        kl: r.mean_pairwise_kl(),
        kl_with_pruned: mean(&r.kl_with_pruned),
        jsd: r.jsd,
        jsd_with_pruned: r.jsd_with_pruned,
        floored: r.floored,
    }
}

enum Job {
    Lottery(u64),
    Scratch(u64),
    Pruned(u64),
}

pub fn run(p: &LotteryParams, data: &Dataset) -> Result<LotteryResult, CliError> {
    run_with(p, data, &[])
}

/// [`run`] reusing any matching pruning runs from `cache`.
pub fn run_with(p: &LotteryParams, data: &Dataset, cache: &[RunArtifacts]) -> Result<LotteryResult, CliError> {
    let pr = &p.protocol;
    pr.validate()?;
    let pruned = pr.pruning_run_cached(data, p.pruning_seed, cache)?;
    let masks = pruned.net.masks();
    let lt = pruned.lottery(pr.rewind_step).map_err(CliError::from_core)?;

    let mut jobs: Vec<Job> = pr.seeds.iter().map(|&s| Job::Lottery(s)).collect();
    jobs.extend(pr.seeds.iter().map(|&s| Job::Scratch(s)));
    if p.diff_pruned {
        jobs.extend(pr.seeds.iter().filter(|&&s| s != p.pruning_seed).map(|&s| Job::Pruned(s)));
    }
    let runs = par_map(jobs, |job| match job {
        Job::Lottery(s) => Ok((0, s, pr.lottery_run(data, &pruned, s)?)),
        Job::Scratch(s) => Ok((1, s, pr.scratch_run(data, &masks, s)?)),
        Job::Pruned(s) => Ok((2, s, pr.pruning_run_cached(data, s, cache)?)),
    })?;
    let group = |g: usize| runs.iter().filter(move |r| r.0 == g).map(|r| (r.1, &r.2));

    let p_soln = ParamPoint::from_network(&pruned.net, PointLabel::PrunedSoln, p.pruning_seed);
    let lt_init = ParamPoint::from_network(&lt.rewound, PointLabel::LtInit, p.pruning_seed);
    let mut points = vec![p_soln.clone(), lt_init.clone()];
    let mut distances = Vec::new();
    let mut paths: Vec<(String, u64, ParamPoint)> = Vec::new();
    for (g, name, init_label, soln_label) in [
        (0, "lt", PointLabel::LtInit, PointLabel::LtSoln),
        (1, "scratch", PointLabel::ScratchInit, PointLabel::ScratchSoln),
    ] {
        for (seed, run) in group(g) {
            let init = ParamPoint::from_network(initial_state(run), init_label, seed);
            let soln = ParamPoint::from_network(&run.net, soln_label, seed);
            let dist = |a: &ParamPoint| l2_distance(a, &p_soln).map_err(CliError::from_core);
            distances.push(DistanceRow {
                group: name.to_string(),
                seed,
                d_start: dist(&init)?,
                d_end: dist(&soln)?,
                test_accuracy: test_eval(run, data)?.accuracy,
            });
            if g == 1 {
                points.push(init.clone());
            }
            points.push(soln.clone());
            paths.push((init_label.name().to_string(), seed, init));
            paths.push((soln_label.name().to_string(), seed, soln));
        }
    }

    // Interpolation towards the pruning solution, on training examples.
    let split = data.train.head(p.interpolation_examples.max(1));
    let grid = alpha_grid(p.interpolation_points);
    let curves: Vec<Vec<InterpolationPoint>> = par_map(paths.iter().collect(), |(_, _, a)| {
        interpolate_loss(a, &p_soln, &pruned.net, &grid, &split).map_err(CliError::from_core)
    })?;
    let mut interpolation = Vec::new();
    let mut barriers = Vec::new();
    for ((path, seed, _), curve) in paths.iter().zip(&curves) {
        for c in curve {
            interpolation.push(InterpolationRow {
                path: path.clone(),
                seed: *seed,
                alpha: c.alpha,
                loss: c.loss,
                accuracy: c.accuracy,
            });
        }
        barriers.push(BarrierRow {
            path: path.clone(),
            seed: *seed,
            start_loss: curve[0].loss,
            end_loss: curve[curve.len() - 1].loss,
            max_loss: curve.iter().map(|c| c.loss).fold(f64::NEG_INFINITY, f64::max),
            barrier: barrier(curve),
        });
    }

    let emb = mds_embed(&points, 2).map_err(CliError::from_core)?;
    let mds = points
        .iter()
        .zip(&emb.coords)
        .map(|(pt, c)| MdsRow {
            label: pt.label.name().to_string(),
            seed: pt.seed,
            x: c[0],
            y: c[1],
        })
        .collect();

    let pruned_pred = predictions(&pruned.net, data)?;
    let labels = &data.test.labels;
    let mut similarity = Vec::new();
    for (g, name) in [(0, "lt"), (1, "scratch"), (2, "diff-pruned")] {
        let preds: Vec<Predictions> = group(g)
            .map(|(_, r)| predictions(&r.net, data))
            .collect::<Result<_, _>>()?;
        if preds.is_empty() {
            continue;
        }
        let rep = similarity_report(&preds, &pruned_pred, labels).map_err(CliError::from_core)?;
        similarity.push(similarity_row(name, &rep));
    }

    Ok(LotteryResult {
        distances,
        interpolation,
        barriers,
        mds,
        mds_stress: emb.stress,
        similarity,
        pruned_accuracy: pruned_pred.accuracy(labels),
    })
}
