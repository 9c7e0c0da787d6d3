//! Signal propagation at initialization: standard deviation of every
//! layer's pre-activations under Gaussian inputs, per sparsity and
//! initialization scheme.

use serde::{Deserialize, Serialize};
use sparselab::init::{sweep_sparsity_probe, InitScheme, ProbeRow};
use sparselab::sparsity::DistributionKind;
use sparselab::NetworkSpec;

use super::par_map;
use crate::output::{gnuplot_lines, ArtifactDir};
use crate::stats::mean;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalParams {
    pub model: NetworkSpec,
    pub distribution: DistributionKind,
    pub sparsities: Vec<f64>,
    pub schemes: Vec<String>,
    pub seeds: Vec<u64>,
    pub n_samples: usize,
}

impl Default for SignalParams {
    fn default() -> Self {
        Self {
            model: NetworkSpec::lenet5(),
            distribution: DistributionKind::Erk,
            sparsities: vec![0.0, 0.5, 0.7, 0.8, 0.9, 0.95, 0.98],
            schemes: ["masked-dense", "layer-scaled", "per-neuron"].map(String::from).to_vec(),
            seeds: (0..5).collect(),
            n_samples: 500,
        }
    }
}

pub struct SignalResult {
    pub rows: Vec<ProbeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSummary {
    pub sparsity: f64,
    pub scheme: String,
    pub mean_output_std: f64,
}

impl SignalResult {
    /// Mean over seeds of the pre-softmax std for one cell. `scheme` may be
    /// a short name such as `per-neuron`.
    pub fn output_std(&self, sparsity: f64, scheme: &str) -> f64 {
        let scheme = scheme
            .parse::<InitScheme>()
            .map(|s| s.to_string())
            .unwrap_or_else(|_| scheme.to_string());
        let scheme = scheme.as_str();
        let last = self.rows.iter().map(|r| r.layer_index).max().unwrap_or(0);
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.sparsity == sparsity && r.scheme == scheme && r.layer_index == last)
            .map(|r| r.std)
            .collect();
        mean(&v)
    }

    pub fn summary(&self) -> Vec<OutputSummary> {
        let mut out: Vec<OutputSummary> = Vec::new();
        for r in &self.rows {
            if !out.iter().any(|o| o.sparsity == r.sparsity && o.scheme == r.scheme) {
                out.push(OutputSummary {
                    sparsity: r.sparsity,
                    scheme: r.scheme.clone(),
                    mean_output_std: self.output_std(r.sparsity, &r.scheme),
                });
            }
        }
        out
    }

    pub fn write(&self, dir: &mut ArtifactDir) -> Result<(), CliError> {
        dir.csv(
            "signal.csv",
            &["sparsity", "scheme", "seed", "layer_index", "std", "n_samples"],
            &self.rows,
        )?;
        dir.csv("signal_output.csv", &["sparsity", "scheme", "mean_output_std"], &self.summary())?;
        dir.text(
            "signal_output.gp",
            &gnuplot_lines("signal_output.csv", "pre-softmax std at initialization", 1, 3, Some(2), true),
        )
    }
}

pub fn run(p: &SignalParams) -> Result<SignalResult, CliError> {
    if p.n_samples == 0 || p.seeds.is_empty() {
        return Err(CliError::Config("probe needs samples and seeds".into()));
    }
    let schemes: Vec<InitScheme> = p
        .schemes
        .iter()
        .map(|s| s.parse().map_err(CliError::from_core))
        .collect::<Result<_, _>>()?;
    // One job per sparsity; rows within a job keep the sweep order.
    let chunks = par_map(p.sparsities.clone(), |s| {
        sweep_sparsity_probe(&p.model, &p.distribution, &[s], &schemes, &p.seeds, p.n_samples)
            .map_err(CliError::from_core)
    })?;
    Ok(SignalResult {
        rows: chunks.into_iter().flatten().collect(),
    })
}
