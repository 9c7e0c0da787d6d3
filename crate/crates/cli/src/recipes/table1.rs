//! Test accuracy of sparse training methods under masked-dense and
//! sparsity-aware initialization, with dense baselines.

use serde::{Deserialize, Serialize};
use sparselab::data::Dataset;
use sparselab::train::RunArtifacts;

use super::gradflow::pruning_runs;
use super::par_map;
use super::protocol::{parse_variants, test_eval, MaskSource, Protocol};
use crate::output::ArtifactDir;
use crate::stats::{mean, std};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Params {
    pub protocol: Protocol,
    pub variants: Vec<String>,
}

impl Default for Table1Params {
    fn default() -> Self {
        Self {
            protocol: Protocol::default(),
            variants: ["dense", "small-dense", "scratch", "scratch+", "set", "set+", "rigl", "rigl+"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub variant: String,
    pub seed: u64,
    pub active_weights: usize,
    pub zero_fan_neurons: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    /// Percent.
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

pub struct Table1Result {
    pub rows: Vec<AccuracyRow>,
}

impl Table1Result {
    /// Test accuracies (percent) of one variant in seed order.
    pub fn accuracies(&self, variant: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| 100.0 * r.test_accuracy)
            .collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        names
            .into_iter()
            .map(|v| {
                let a = self.accuracies(v);
                SummaryRow {
                    variant: v.to_string(),
                    runs: a.len(),
                    mean_accuracy: mean(&a),
                    std_accuracy: std(&a),
                }
            })
            .collect()
    }

    pub fn write(&self, dir: &mut ArtifactDir) -> Result<(), CliError> {
        dir.csv(
            "table1.csv",
            &["variant", "seed", "active_weights", "zero_fan_neurons", "test_loss", "test_accuracy"],
            &self.rows,
        )?;
        dir.csv(
            "table1_summary.csv",
            &["variant", "runs", "mean_accuracy", "std_accuracy"],
            &self.summary(),
        )
    }
}

pub fn run(p: &Table1Params, data: &Dataset) -> Result<Table1Result, CliError> {
    run_with(p, data, &[])
}

/// [`run`] reusing any matching pruning runs from `cache`.
pub fn run_with(p: &Table1Params, data: &Dataset, cache: &[RunArtifacts]) -> Result<Table1Result, CliError> {
    let pr = &p.protocol;
    pr.validate()?;
    let variants = parse_variants(&p.variants)?;
    let pruned = pruning_runs(pr, data, &variants, cache)?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..pr.seeds.len()).map(move |s| (v, s)))
        .collect();
    let rows = par_map(jobs, |(v, s)| {
        let seed = pr.seeds[s];
        let masks = match pr.masks {
            MaskSource::Pruning => pruned[s].as_ref().map(|r| r.net.masks()),
            MaskSource::Random => None,
        };
        let run = pr.run_variant(data, &variants[v], masks.as_deref(), pruned[s].as_ref(), seed)?;
        let eval = test_eval(&run, data)?;
        Ok(AccuracyRow {
            variant: variants[v].name.clone(),
            seed,
            active_weights: run.net.active_weights(),
            zero_fan_neurons: run.init_report.total_zero_fan(),
            test_loss: eval.loss,
            test_accuracy: eval.accuracy,
        })
    })?;
    Ok(Table1Result { rows })
}
