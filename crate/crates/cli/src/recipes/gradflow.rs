//! Gradient flow over the course of training for static, dynamic,
//! lottery and dense variants.

use serde::{Deserialize, Serialize};
use sparselab::data::Dataset;
use sparselab::train::RunArtifacts;

use super::par_map;
use super::protocol::{parse_variants, test_eval, MaskSource, Method, Protocol, Variant};
use crate::output::{gnuplot_lines, ArtifactDir};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradFlowParams {
    pub protocol: Protocol,
    pub variants: Vec<String>,
}

impl Default for GradFlowParams {
    fn default() -> Self {
        let mut protocol = Protocol::default();
        protocol.train.flow_every = Some(100);
        Self {
            protocol,
            variants: ["scratch", "scratch+", "set+", "rigl+", "lottery", "small-dense"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRow {
    pub variant: String,
    pub seed: u64,
    pub step: u64,
    pub grad_flow: f64,
    pub per_param: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalRow {
    pub variant: String,
    pub seed: u64,
    pub active_weights: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

pub struct GradFlowResult {
    pub flow: Vec<FlowRow>,
    pub finals: Vec<FinalRow>,
}

impl GradFlowResult {
    pub fn write(&self, dir: &mut ArtifactDir) -> Result<(), CliError> {
        dir.csv("gradflow.csv", &["variant", "seed", "step", "grad_flow", "per_param"], &self.flow)?;
        dir.csv(
            "final.csv",
            &["variant", "seed", "active_weights", "test_loss", "test_accuracy"],
            &self.finals,
        )?;
        dir.text(
            "gradflow.gp",
            &gnuplot_lines("gradflow.csv", "gradient flow during training", 3, 4, Some(1), true),
        )
    }
}

/// Pruning runs per seed when any variant or the mask source needs them.
pub(crate) fn pruning_runs(
    p: &Protocol,
    data: &Dataset,
    variants: &[Variant],
    cache: &[RunArtifacts],
) -> Result<Vec<Option<RunArtifacts>>, CliError> {
    let needed = p.masks == MaskSource::Pruning
        || variants
            .iter()
            .any(|v| matches!(v.method, Method::Pruning | Method::Lottery));
    if !needed {
        return Ok(vec![None; p.seeds.len()]);
    }
    par_map(p.seeds.clone(), |s| p.pruning_run_cached(data, s, cache).map(Some))
}

pub fn run(p: &GradFlowParams, data: &Dataset) -> Result<GradFlowResult, CliError> {
    let pr = &p.protocol;
    pr.validate()?;
    let variants = parse_variants(&p.variants)?;
    let pruned = pruning_runs(pr, data, &variants, &[])?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..pr.seeds.len()).map(move |s| (v, s)))
        .collect();
    let runs = par_map(jobs, |(v, s)| {
        let seed = pr.seeds[s];
        let masks = match pr.masks {
            MaskSource::Pruning => pruned[s].as_ref().map(|r| r.net.masks()),
            MaskSource::Random => None,
        };
        let run = pr.run_variant(data, &variants[v], masks.as_deref(), pruned[s].as_ref(), seed)?;
        let eval = test_eval(&run, data)?;
        let flow: Vec<FlowRow> = run
            .flow
            .iter()
            .map(|f| FlowRow {
                variant: variants[v].name.clone(),
                seed,
                step: f.step,
                grad_flow: f.grad_flow,
                per_param: f.per_param,
            })
            .collect();
        let fin = FinalRow {
            variant: variants[v].name.clone(),
            seed,
            active_weights: run.net.active_weights(),
            test_loss: eval.loss,
            test_accuracy: eval.accuracy,
        };
        Ok((flow, fin))
    })?;
    let mut out = GradFlowResult {
        flow: Vec::new(),
        finals: Vec::new(),
    };
    for (f, fin) in runs {
        out.flow.extend(f);
        out.finals.push(fin);
    }
    Ok(out)
}
