//! The `train`, `analyze` and `probe` subcommands as library functions.

use std::path::Path;

use serde::Serialize;
use sparselab::checkpoint::{encode, load_state};
use sparselab::data::evaluate;
use sparselab::flow::{full_hessian, gradient_flow, spectrum, HESSIAN_CAP};
use sparselab::train::{train, RunArtifacts};
use sparselab::{build_network, Error};

use crate::config::RunConfig;
use crate::output::{ArtifactDir, Manifest};
use crate::CliError;

#[derive(Serialize)]
struct MetricRow {
    epoch: usize,
    step: u64,
    train_loss: f64,
    test_loss: Option<f64>,
    test_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct FlowRow<'a> {
    step: u64,
    tag: &'a str,
    batch: &'a str,
    grad_flow: f64,
    per_param: f64,
}

#[derive(Serialize)]
struct UpdateRow {
    step: u64,
    alpha: f64,
    layer: usize,
    dropped: usize,
    grown: usize,
    shortfall: usize,
    flow_before: Option<f64>,
    flow_after: Option<f64>,
}

/// Trains one configuration and writes metrics, gradient flow, mask
/// updates, checkpoints and a manifest into `out`. A diverged run leaves
/// its last finite state in `diverged.ckpt`.
pub fn train_command(cfg: &RunConfig, out: &Path) -> Result<(RunArtifacts, Manifest), CliError> {
    let data = cfg.data.load()?;
    let mut tc = cfg.train.clone();
    let per_epoch = tc.steps_per_epoch(data.train.len());
    if cfg.checkpoint_every_epochs > 0 {
        let every = cfg.checkpoint_every_epochs;
        tc.snapshot_steps
            .extend((every..=tc.epochs).step_by(every).map(|e| e as u64 * per_epoch));
    }
    let mut dir = ArtifactDir::create(out)?;
    let run = match train(&tc, &data) {
        Ok(r) => r,
        Err(Error::Diverged { step, loss, snapshot }) => {
            dir.bytes("diverged.ckpt", &snapshot)?;
            return Err(CliError::Runtime(format!(
                "loss {loss} at step {step}; last finite state written to diverged.ckpt"
            )));
        }
        Err(e) => return Err(CliError::from_core(e)),
    };

    let metrics: Vec<MetricRow> = run
        .epochs
        .iter()
        .map(|e| MetricRow {
            epoch: e.epoch,
            step: e.step,
            train_loss: e.train_loss,
            test_loss: e.test_loss,
            test_accuracy: e.test_accuracy,
        })
        .collect();
    dir.csv("metrics.csv", &["epoch", "step", "train_loss", "test_loss", "test_accuracy"], &metrics)?;
    let flow: Vec<FlowRow> = run
        .flow
        .iter()
        .map(|f| FlowRow {
            step: f.step,
            tag: f.tag.name(),
            batch: &f.batch,
            grad_flow: f.grad_flow,
            per_param: f.per_param,
        })
        .collect();
    dir.csv("flow.csv", &["step", "tag", "batch", "grad_flow", "per_param"], &flow)?;
    let updates: Vec<UpdateRow> = run
        .updates
        .iter()
        .flat_map(|u| {
            u.report.layers.iter().map(move |l| UpdateRow {
                step: u.report.step,
                alpha: u.report.alpha,
                layer: l.layer,
                dropped: l.dropped.len(),
                grown: l.grown.len(),
                shortfall: l.shortfall,
                flow_before: u.flow.map(|f| f.before),
                flow_after: u.flow.map(|f| f.after),
            })
        })
        .collect();
    dir.csv(
        "updates.csv",
        &["step", "alpha", "layer", "dropped", "grown", "shortfall", "flow_before", "flow_after"],
        &updates,
    )?;
    if cfg.checkpoint_every_epochs > 0 {
        for (step, net) in &run.snapshots {
            if *step > 0 && step % (per_epoch * cfg.checkpoint_every_epochs as u64) == 0 {
                dir.bytes(&format!("epoch-{:03}.ckpt", step / per_epoch), &encode(net, None))?;
            }
        }
    }
    dir.bytes("final.ckpt", &encode(&run.net, Some(&run.velocity)))?;
    let manifest = dir.manifest("train", "train", cfg, &[cfg.train.seed], &cfg.data.describe())?;
    Ok((run, manifest))
}

#[derive(Serialize)]
struct Eig {
    index: usize,
    eigenvalue: f64,
}

#[derive(Serialize)]
struct Density {
    lambda: f64,
    density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Analysis {
    pub step: u64,
    pub active_weights: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub grad_flow: f64,
    pub largest_negative: Option<f64>,
    pub min_eigenvalue: Option<f64>,
    pub max_eigenvalue: Option<f64>,
}

/// Evaluates a checkpoint of the model described by `cfg`: test metrics,
/// gradient flow on the first `flow_probe` training examples and, when
/// `hessian_examples > 0`, the Hessian spectrum on that many examples.
pub fn analyze_command(
    cfg: &RunConfig,
    checkpoint: &Path,
    hessian_examples: usize,
    out: &Path,
) -> Result<Analysis, CliError> {
    let data = cfg.data.load()?;
    let mut net = build_network(&cfg.train.model).map_err(CliError::from_core)?;
    load_state(&mut net, checkpoint).map_err(CliError::from_core)?;
    let eval = evaluate(&net, &data.test).map_err(CliError::from_core)?;
    let probe = cfg.train.flow_probe.min(data.train.len());
    let (x, y) = data.train.range(0, probe);
    let flow = gradient_flow(&net, &x, &y).map_err(CliError::from_core)?;
    let mut dir = ArtifactDir::create(out)?;
    let mut analysis = Analysis {
        step: net.step,
        active_weights: net.active_weights(),
        test_loss: eval.loss,
        test_accuracy: eval.accuracy,
        grad_flow: flow,
        largest_negative: None,
        min_eigenvalue: None,
        max_eigenvalue: None,
    };
    if hessian_examples > 0 {
        let split = data.train.head(hessian_examples);
        let h = full_hessian(&net, &split, HESSIAN_CAP).map_err(CliError::from_core)?;
        let s = spectrum(&h, None).map_err(CliError::from_core)?;
        analysis.largest_negative = Some(s.largest_negative());
        analysis.min_eigenvalue = Some(s.min());
        analysis.max_eigenvalue = Some(s.max());
        let eig: Vec<Eig> = s
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(index, &eigenvalue)| Eig { index, eigenvalue })
            .collect();
        dir.csv("eigenvalues.csv", &["index", "eigenvalue"], &eig)?;
        let density: Vec<Density> = s.density.iter().map(|&(lambda, density)| Density { lambda, density }).collect();
        dir.csv("density.csv", &["lambda", "density"], &density)?;
    }
    dir.csv(
        "analysis.csv",
        &[
            "step",
            "active_weights",
            "test_loss",
            "test_accuracy",
            "grad_flow",
            "largest_negative",
            "min_eigenvalue",
            "max_eigenvalue",
        ],
        std::slice::from_ref(&analysis),
    )?;
    dir.manifest("analyze", &checkpoint.display().to_string(), cfg, &[cfg.train.seed], &cfg.data.describe())?;
    Ok(analysis)
}
